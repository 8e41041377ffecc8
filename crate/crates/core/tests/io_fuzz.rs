//! Mutated files must produce errors, never panics.

use std::panic::catch_unwind;

mod common;

use ccnn::arch::{build_network, NetworkSpec};
use ccnn::data::gnt::{parse_gnt, ClassMap};
use ccnn::data::idx;
use ccnn::model_file::ModelFile;
use ccnn::quant::QuantScheme;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::fuzz::{gnt_fixture, idx_fixture, mutate};

const FIXTURES: usize = 1000;

#[test]
fn mutated_idx_never_panics() {
    let (img, lbl) = idx_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut errors = 0;
    for _ in 0..FIXTURES {
        let (a, b) = if rng.gen_bool(0.5) { (mutate(&mut rng, img.clone()), lbl.clone()) } else { (img.clone(), mutate(&mut rng, lbl.clone())) };
        let res = catch_unwind(|| idx::decode(&a, &b).map(|s| s.len()));
        assert!(res.is_ok(), "panic on images {a:?} labels {b:?}");
        errors += res.unwrap().is_err() as usize;
    }
    assert!(errors > FIXTURES / 2);
}

#[test]
fn mutated_gnt_never_panics() {
    let bytes = gnt_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..FIXTURES {
        let m = mutate(&mut rng, bytes.clone());
        let res = catch_unwind(|| ClassMap::discover(&m).and_then(|map| parse_gnt(&m, &map, 16)).map(|l| l.samples.len()));
        assert!(res.is_ok(), "panic on {m:?}");
    }
}

#[test]
fn mutated_model_files_never_panic() {
    let net = build_network(&NetworkSpec::hccr(3, 8, true).unwrap(), 0).unwrap();
    let files = [
        ModelFile::from_network(&net).to_bytes().unwrap(),
        ModelFile::quantized(&net, &QuantScheme::default()).unwrap().to_bytes().unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..200 {
        let m = mutate(&mut rng, files[i % 2].clone());
        let res = catch_unwind(|| ModelFile::from_bytes(&m).and_then(|f| f.to_network()).map(|_| ()));
        assert!(matches!(res, Ok(Err(_)) | Ok(Ok(()))), "panic on mutation {i}");
        // A checksum guards the whole file, so any real change is rejected.
        if m != files[i % 2] {
            assert!(res.unwrap().is_err(), "mutation {i} accepted");
        }
    }
}
