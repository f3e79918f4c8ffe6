mod common;

use std::io::Read;

use half::f16;
use pwguess::markov::{train_ngram, NgramConfig};
use pwguess::mc_estimator::{build_estimator, guess_numbers, MonteCarloEstimator};
use pwguess::model::{DecoderWeights, ModelConfig};
use pwguess::psm::{
    calibrate_factor, decade_bin, error_matrix, min_guess, psm_strength, raw_estimates, safe_errors_at, ErrorMatrix,
    Precision, PsmBundle, QuantizationMode,
};
use pwguess::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> (DecoderWeights<f32>, MonteCarloEstimator) {
    let w = DecoderWeights::<f32>::init(ModelConfig::toy(), 3).unwrap();
    let est = build_estimator(&w, "toy-init", 2000, 4).unwrap();
    (w, est)
}

fn mode(kind: Precision, zip: bool) -> QuantizationMode {
    QuantizationMode { kind, zip }
}

#[test]
fn bundle_round_trips_bit_exactly() {
    let (w, est) = toy();
    for kind in [Precision::Fp32, Precision::Fp16, Precision::Int8] {
        for zip in [false, true] {
            let b = PsmBundle::build(&w, mode(kind, zip), est.clone()).unwrap();
            let bytes = b.to_file_bytes().unwrap();
            assert_eq!(bytes, PsmBundle::build(&w, mode(kind, zip), est.clone()).unwrap().to_file_bytes().unwrap());
            assert_eq!(bytes[..2] == [0x1f, 0x8b], zip);
            let back = PsmBundle::parse(&bytes).unwrap();
            assert_eq!(back, b);
            assert_eq!(back.to_file_bytes().unwrap(), bytes);
            assert_eq!(back.weights().params(), b.weights().params());
        }
    }
}

#[test]
fn layout_decodes_by_hand() {
    let (w, est) = toy();
    let b = PsmBundle::build(&w, mode(Precision::Int8, true), est.clone()).unwrap();
    let mut raw = Vec::new();
    flate2::read::GzDecoder::new(b.to_file_bytes().unwrap().as_slice()).read_to_end(&mut raw).unwrap();
    assert_eq!(raw, b.to_bytes().unwrap());
    assert_eq!(&raw[..4], b"PSMB");
    assert_eq!(u32::from_le_bytes(raw[4..8].try_into().unwrap()), 1);
    let mlen = u32::from_le_bytes(raw[8..12].try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&raw[12..12 + mlen]).unwrap();
    assert_eq!(serde_json::to_vec(&manifest).unwrap(), raw[12..12 + mlen]);
    let payload_len = manifest["payload_bytes"].as_u64().unwrap() as usize;
    let table_len = manifest["estimator"]["table_len"].as_u64().unwrap() as usize;
    assert_eq!(table_len, est.table_len());
    assert_eq!(raw.len(), 12 + mlen + payload_len + 12 * table_len + 8);
    assert_eq!(manifest["vocabulary"].as_array().unwrap().len(), w.config().vocab_size);
    let payload = &raw[12 + mlen..12 + mlen + payload_len];
    let mut next = 0;
    for t in manifest["tensors"].as_array().unwrap() {
        let offset = t["offset"].as_u64().unwrap() as usize;
        assert_eq!(offset, next);
        let count: usize = t["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap() as usize).product();
        let name = t["name"].as_str().unwrap();
        let spec = w.layout().tensors.iter().find(|s| s.name == name).unwrap();
        let original = &w.params()[spec.range()];
        match t["dtype"].as_str().unwrap() {
            "f32" => {
                assert!(spec.is_norm());
                for (i, v) in original.iter().enumerate() {
                    let at = offset + 4 * i;
                    assert_eq!(f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()), *v);
                }
                next = offset + 4 * count;
            }
            "i8" => {
                let scale = t["scale"].as_f64().unwrap();
                for (i, v) in original.iter().enumerate() {
                    let decoded = payload[offset + i] as i8 as f64 * scale;
                    assert!((decoded - *v as f64).abs() <= scale / 2.0 + 1e-7);
                }
                next = offset + count;
            }
            other => panic!("unexpected dtype {other}"),
        }
    }
    assert_eq!(next, payload_len);
    let table = &raw[12 + mlen + payload_len..];
    let first = f32::from_le_bytes(table[..4].try_into().unwrap());
    assert_eq!(first as f64, est.log_probs()[0] as f64);
}

#[test]
fn fp16_weights_are_within_half_an_ulp() {
    let (w, est) = toy();
    let b = PsmBundle::build(&w, mode(Precision::Fp16, false), est).unwrap();
    for spec in w.layout().tensors.iter().filter(|t| !t.is_norm()) {
        for (&orig, &got) in w.params()[spec.range()].iter().zip(&b.weights().params()[spec.range()]) {
            let h = f16::from_f32(orig);
            let ulp = (f16::from_bits(h.to_bits() + 1).to_f32() - h.to_f32()).abs();
            assert!((got - orig).abs() <= ulp / 2.0 + f32::EPSILON * orig.abs(), "{orig} -> {got}");
        }
    }
}

#[test]
fn unit_factor_fp32_bundle_reproduces_the_pipeline() {
    let (w, est) = toy();
    let b = PsmBundle::build(&w, mode(Precision::Fp32, false), est.clone()).unwrap();
    assert_eq!(b.weights().params(), w.params());
    let test = common::corpus(common::mixture(200, 0.5, 9), "mix");
    let direct = guess_numbers(&est, &w, test.passwords());
    for (pw, d) in test.passwords().iter().zip(direct) {
        let d = d.unwrap();
        let (raw, se) = b.raw_estimate(pw).unwrap();
        assert_eq!(raw.to_bits(), d.guess_number.to_bits());
        assert_eq!(se.to_bits(), d.standard_error.to_bits());
        let r = psm_strength(&b, pw).unwrap();
        assert_eq!(r.guess_number, d.guess_number.max(1.0));
        assert_eq!(r.bin, decade_bin(r.guess_number));
    }
}

#[test]
fn error_matrix_and_scaling_trade_off() {
    let (w, est) = toy();
    let b = PsmBundle::build(&w, mode(Precision::Int8, false), est).unwrap();
    let data = common::corpus(common::mixture(3000, 0.3, 5), "mix");
    let ngram = train_ngram(&data, NgramConfig::default()).unwrap();
    let ngram_est = build_estimator(&ngram, "6gram", 5000, 6).unwrap();
    let test = common::corpus(common::mixture(300, 0.3, 7), "eval");
    let oracle: Vec<Option<f64>> = guess_numbers(&ngram_est, &ngram, test.passwords())
        .into_iter()
        .map(|g| g.map(|g| g.guess_number))
        .collect();
    let m = error_matrix(&b, &oracle, &test).unwrap();
    assert_eq!(m.total, test.len());
    assert_eq!(m.safe + m.unsafe_errors + m.accurate, m.total);
    assert_eq!(m.counts.iter().flatten().sum::<usize>(), m.total);
    assert!((m.safe_rate() + m.unsafe_rate() + m.accurate_rate() - 1.0).abs() < 1e-12);

    let raw = raw_estimates(&b, &test).unwrap();
    let dense: Vec<f64> = oracle.iter().map(|o| o.unwrap()).collect();
    let mut prev = ErrorMatrix::from_bins(std::iter::empty());
    for (i, f) in [1.0, 2.0, 10.0, 1e3, 1e6, 1e12, 1e25].into_iter().enumerate() {
        let bins = raw.iter().zip(&dense).map(|(&r, &o)| (decade_bin(o), decade_bin((r / f).max(1.0))));
        let m = ErrorMatrix::from_bins(bins);
        assert_eq!(m.safe, safe_errors_at(&raw, &dense, f));
        if i > 0 {
            assert!(m.safe >= prev.safe && m.unsafe_errors <= prev.unsafe_errors);
        }
        prev = m;
    }
    assert_eq!(prev.unsafe_errors, 0);

    let mut gapped = oracle.clone();
    gapped[17] = None;
    assert!(matches!(error_matrix(&b, &gapped, &test), Err(Error::MissingOracle(17))));
}

#[test]
fn calibration_matches_a_linear_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let oracle: Vec<f64> = (0..400).map(|_| 10f64.powf(rng.random_range(0.0..15.0))).collect();
    let raw: Vec<f64> = oracle.iter().map(|o| o * 10f64.powf(rng.random_range(-1.0..3.0))).collect();
    let sweep: Vec<usize> = (1..=5000).map(|f| safe_errors_at(&raw, &oracle, f as f64)).collect();
    for target in [sweep[0], sweep[3], sweep[99], sweep[4999]] {
        let want = sweep.iter().position(|&s| s >= target).unwrap() + 1;
        assert_eq!(calibrate_factor(&raw, &oracle, target).unwrap(), want as f64);
    }
    assert!(matches!(calibrate_factor(&raw, &oracle, 400), Err(Error::Unreachable { .. })));
    assert!(calibrate_factor(&raw, &oracle, 401).is_err());
}

#[test]
fn scaling_factor_below_one_is_rejected() {
    let (w, est) = toy();
    let mut b = PsmBundle::build(&w, mode(Precision::Fp32, false), est).unwrap();
    assert!(b.set_scaling_factor(0.5).is_err());
    assert!(b.set_scaling_factor(f64::NAN).is_err());
    b.set_scaling_factor(8.0).unwrap();
    let back = PsmBundle::parse(&b.to_bytes().unwrap()).unwrap();
    assert_eq!(back.scaling_factor(), 8.0);
}

#[test]
fn min_guess_takes_the_smallest() {
    let g = min_guess(&[("a".into(), 30.0), ("b".into(), 7.5), ("c".into(), 1e9)]).unwrap();
    assert_eq!(g, 7.5);
    assert!(min_guess(&[]).is_err());
}

#[test]
fn damaged_bundles_are_rejected() {
    let (w, est) = toy();
    let b = PsmBundle::build(&w, mode(Precision::Int8, false), est).unwrap();
    let bytes = b.to_bytes().unwrap();
    for cut in [0, 3, 11, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(PsmBundle::parse(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(PsmBundle::parse(&bad), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(PsmBundle::parse(&long).is_err());
    let zipped = PsmBundle::build(&w, mode(Precision::Int8, true), b.estimator().clone()).unwrap().to_file_bytes().unwrap();
    assert!(PsmBundle::parse(&zipped[..zipped.len() - 10]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.psmb");
    b.save(&path).unwrap();
    assert_eq!(PsmBundle::load(&path).unwrap(), b);
    assert!(matches!(PsmBundle::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}
