//! Shared helpers for integration tests.
//!
//! The full MNIST files are not available offline, so tests use a stand-in
//! with the same file names, shapes and counts. It is built from 10000 real
//! MNIST digits stored in `tests/fixtures` (taken from the MIT-licensed
//! `mnist` npm package, shuffled once). Training images cycle through the
//! first 8000 digits under small shifts, so the first 8000 are the digits
//! themselves. Test images cycle through the remaining 2000.

#![allow(dead_code)]

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use flate2::write::GzEncoder;
use flate2::Compression;
use npvae::data::{parse_idx, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};

const SIDE: usize = 28;
const TRAIN_SOURCE: usize = 8000;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Shift of copy `k`: copy 0 is centered, later copies move up to 3 pixels.
fn shift(k: usize) -> (isize, isize) {
    let wrap = |v: usize| ((v + 3) % 7) as isize - 3;
    (wrap(k), wrap(k / 7))
}

fn render(src: &[u8], k: usize) -> Vec<u8> {
    let (dy, dx) = shift(k);
    let mut img = vec![0u8; SIDE * SIDE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let y = r as isize + dy;
            let x = c as isize + dx;
            if (0..SIDE as isize).contains(&y) && (0..SIDE as isize).contains(&x) {
                img[y as usize * SIDE + x as usize] = src[r * SIDE + c];
            }
        }
    }
    img
}

fn idx_file(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

fn build(dir: &Path) {
    let digits = parse_idx(fixture("mnist10k-images-idx3-ubyte.gz")).unwrap();
    let labels = parse_idx(fixture("mnist10k-labels-idx1-ubyte.gz")).unwrap();
    let n_digits = digits.dims[0];
    let px = SIDE * SIDE;
    let small: Vec<&[u8]> = (0..n_digits).map(|i| &digits.data[i * px..(i + 1) * px]).collect();

    let make = |count: usize, first: usize, pool: usize| {
        let mut imgs = Vec::with_capacity(count * SIDE * SIDE);
        let mut labs = Vec::with_capacity(count);
        for i in 0..count {
            let d = first + i % pool;
            imgs.extend(render(small[d], i / pool));
            labs.push(labels.data[d]);
        }
        (imgs, labs)
    };
    let (train_x, train_y) = make(60_000, 0, TRAIN_SOURCE);
    let (test_x, test_y) = make(10_000, TRAIN_SOURCE, n_digits - TRAIN_SOURCE);
    let dims = |n: u32| [n, SIDE as u32, SIDE as u32];
    fs::write(dir.join(TRAIN_IMAGES), idx_file(0x803, &dims(60_000), &train_x)).unwrap();
    fs::write(dir.join(TRAIN_LABELS), idx_file(0x801, &[60_000], &train_y)).unwrap();
    fs::write(
        dir.join(format!("{TEST_IMAGES}.gz")),
        gzip(&idx_file(0x803, &dims(10_000), &test_x)),
    )
    .unwrap();
    fs::write(
        dir.join(format!("{TEST_LABELS}.gz")),
        gzip(&idx_file(0x801, &[10_000], &test_y)),
    )
    .unwrap();
}

/// Directory holding the stand-in MNIST files, generated once per target
/// directory. Safe to call from concurrent test binaries.
pub fn standin_mnist_dir() -> PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
        let dir = root.join("standin-mnist-v2");
        if !dir.join(TEST_LABELS.to_string() + ".gz").exists() {
            let tmp = root.join(format!("standin-mnist-tmp-{}", std::process::id()));
            let _ = fs::remove_dir_all(&tmp);
            fs::create_dir_all(&tmp).unwrap();
            build(&tmp);
            if fs::rename(&tmp, &dir).is_err() {
                // another process won the race
                let _ = fs::remove_dir_all(&tmp);
            }
        }
        dir
    })
    .clone()
}

pub fn npvae_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_npvae"))
}
