#![allow(dead_code)]

pub mod oracle;
pub mod props;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ursam_core::volume::{BinaryMask, Dims, Spacing};

pub fn mask2(h: usize, w: usize, bits: &[u8]) -> BinaryMask {
    BinaryMask::new(Dims::new(1, h, w).unwrap(), Spacing::default(), bits.to_vec()).unwrap()
}

/// Every regular file under `root`, keyed by relative path, with contents.
pub fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
