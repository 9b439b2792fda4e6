//! The checked-in fuzz corpus: complete seeds decode, truncated ones are
//! rejected, and nothing panics.

use std::fs;
use std::path::PathBuf;

use blurfield::deconv::GmmPrior;
use blurfield::fuse::ConfidenceVolume;
use blurfield::predict::CnnModel;
use blurfield::synth::PatchDataset;
use blurfield::MotionField;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty());
    out
}

fn check(target: &str, decodes: impl Fn(&[u8]) -> bool) {
    for (name, bytes) in seeds(target) {
        let expect = !name.ends_with("_truncated");
        assert_eq!(decodes(&bytes), expect, "{target}/{name}");
    }
}

#[test]
fn mfld_seeds() {
    check("decode_mfld", |b| MotionField::decode(b).is_ok());
}

#[test]
fn cnnw_seeds() {
    check("decode_cnnw", |b| match CnnModel::decode(b) {
        Ok(m) => {
            assert_eq!(m.encode(), b);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn gmmp_seeds() {
    check("decode_gmmp", |b| match GmmPrior::decode(b) {
        Ok(p) => {
            assert_eq!(p.encode(), b);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn ptch_seeds() {
    check("decode_ptch", |b| match PatchDataset::decode(b) {
        Ok(d) => {
            assert_eq!(d.encode(), b);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn conf_seeds() {
    check("decode_conf", |b| ConfidenceVolume::decode(b).is_ok());
}
