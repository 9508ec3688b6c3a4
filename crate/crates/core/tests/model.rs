use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ul2prune::corpus::special::PAD;
use ul2prune::model::{forward, load_checkpoint, loss, save_checkpoint, ModelCheckpoint, ModelConfig, BLOB_FILE};
use ul2prune::tensor::{rotary_angle, Tensor};
use ul2prune::Error;

fn small() -> ModelConfig {
    ModelConfig::new(2, 4, 64, 172, 4, 512).unwrap()
}

fn tiny() -> ModelConfig {
    ModelConfig::new(1, 2, 16, 24, 2, 256).unwrap()
}

fn ids(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(200..vocab)).collect()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn parameter_count_closed_form() {
    let cfg = small();
    // 2·V·H + enc·(4·H·A + 3·H·F + 2·H) + dec·(8·H·A + 3·H·F + 3·H) + 2·H
    let (v, h, a, f) = (512, 64, 64, 172);
    let expect = 2 * v * h + 2 * (4 * h * a + 3 * h * f + 2 * h) + 4 * (8 * h * a + 3 * h * f + 3 * h) + 2 * h;
    let m = ModelCheckpoint::<f32>::build(cfg, 0).unwrap();
    assert_eq!(m.param_count(), expect);
}

#[test]
fn output_shape_and_reproducible_argmax() {
    let m = ModelCheckpoint::<f32>::build(small(), 0).unwrap();
    let out = forward(&m, &[300], &[3]).unwrap();
    assert_eq!(out.shape(), &[1, 512]);
    assert!(out.all_finite());
    let again = forward(&m, &[300], &[3]).unwrap();
    assert_eq!(out, again);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = forward(&m, &ids(&mut rng, 9, 512), &ids(&mut rng, 5, 512)).unwrap();
    assert_eq!(out.shape(), &[5, 512]);
}

#[test]
fn out_of_range_ids_are_input_errors() {
    let m = ModelCheckpoint::<f32>::build(tiny(), 0).unwrap();
    assert!(matches!(forward(&m, &[256], &[3]), Err(Error::Input(_))));
    assert!(matches!(forward(&m, &[3], &[]), Err(Error::Input(_))));
}

#[test]
fn padded_encoder_tail_matches_truncation() {
    let m = ModelCheckpoint::<f32>::build(small(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let enc = ids(&mut rng, 7, 512);
    let dec = ids(&mut rng, 4, 512);
    let base = forward(&m, &enc, &dec).unwrap();
    let mut padded = enc.clone();
    padded.extend([PAD; 5]);
    let with_pad = forward(&m, &padded, &dec).unwrap();
    assert!(max_abs_diff(&base, &with_pad) < 1e-5);
}

#[test]
fn decoder_is_causal() {
    let m = ModelCheckpoint::<f32>::build(small(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let enc = ids(&mut rng, 6, 512);
    let dec = ids(&mut rng, 8, 512);
    let base = forward(&m, &enc, &dec).unwrap();
    for j in 1..dec.len() {
        let mut changed = dec.clone();
        changed[j] = if changed[j] == 400 { 401 } else { 400 };
        let out = forward(&m, &enc, &changed).unwrap();
        let prefix = j * 512;
        assert_eq!(&base.data()[..prefix], &out.data()[..prefix], "position {j} leaked backwards");
        assert_ne!(&base.data()[prefix..], &out.data()[prefix..]);
    }
}

#[test]
fn decoder_reads_the_encoder() {
    let m = ModelCheckpoint::<f32>::build(small(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let enc = ids(&mut rng, 6, 512);
    let dec = ids(&mut rng, 3, 512);
    let base = forward(&m, &enc, &dec).unwrap();
    let zeroed = forward(&m, &vec![PAD; enc.len()], &dec).unwrap();
    assert!(max_abs_diff(&base, &zeroed) > 1e-6);
}

#[test]
fn rotary_scores_depend_on_offset_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let hd = 16;
    let q: Vec<f64> = (0..hd).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..hd).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rotate = |x: &[f64], pos: usize| {
        let half = hd / 2;
        let mut y = x.to_vec();
        for i in 0..half {
            let (c, s) = (rotary_angle(pos, i, hd).cos(), rotary_angle(pos, i, hd).sin());
            y[i] = x[i] * c - x[i + half] * s;
            y[i + half] = x[i] * s + x[i + half] * c;
        }
        y
    };
    let score = |pq: usize, pk: usize| -> f64 { rotate(&q, pq).iter().zip(rotate(&k, pk)).map(|(a, b)| a * b).sum() };
    for (pq, pk, shift) in [(5, 2, 11), (0, 7, 100), (30, 30, 3)] {
        assert!((score(pq, pk) - score(pq + shift, pk + shift)).abs() < 1e-5);
    }
    assert!((score(5, 2) - score(5, 3)).abs() > 1e-6);
}

#[test]
fn loss_contracts() {
    let v = 512;
    let uniform = Tensor::<f32>::zeros(&[3, v]);
    let l = loss(&uniform, &[1, 2, 3], &[true; 3]).unwrap();
    assert!((l.data()[0] as f64 - (v as f64).ln()).abs() < 1e-5);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<f32> = (0..3 * v).map(|_| rng.random_range(-2.0..2.0)).collect();
    let logits = Tensor::new(vec![3, v], data).unwrap();
    let a = loss(&logits, &[5, 6, 7], &[true, false, true]).unwrap();
    let b = loss(&logits, &[5, 100, 7], &[true, false, true]).unwrap();
    assert_eq!(a, b);
    assert!(matches!(loss(&logits, &[5, 6, 7], &[false; 3]), Err(Error::Contract(_))));

    let mut sharp = vec![0.0f32; 2 * v];
    sharp[9] = 60.0;
    sharp[v + 4] = 60.0;
    let sharp = Tensor::new(vec![2, v], sharp).unwrap();
    assert!(loss(&sharp, &[9, 4], &[true; 2]).unwrap().data()[0] < 1e-12);
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = ModelCheckpoint::<f32>::build(small(), 9).unwrap();
    m.set_meta("stage", "stage2");
    m.set_meta("token_remap", "vocab_plan.json");
    save_checkpoint(&m, dir.path()).unwrap();
    let back: ModelCheckpoint<f32> = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.metadata, m.metadata);
    for (name, t) in &m.tensors {
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t), bits(&back.tensors[name]), "{name}");
    }

    let m64 = ModelCheckpoint::<f64>::build(tiny().with_precision(ul2prune::tensor::Precision::F64), 1).unwrap();
    let dir64 = tempfile::tempdir().unwrap();
    save_checkpoint(&m64, dir64.path()).unwrap();
    assert_eq!(load_checkpoint::<f64>(dir64.path()).unwrap(), m64);
    assert!(matches!(load_checkpoint::<f32>(dir64.path()), Err(Error::Format(_))));
}

#[test]
fn truncated_blob_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = ModelCheckpoint::<f32>::build(tiny(), 0).unwrap();
    save_checkpoint(&m, dir.path()).unwrap();
    let blob = dir.path().join(BLOB_FILE);
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Format(_))));

    std::fs::write(dir.path().join("manifest.json"), "{\"format\": 1").unwrap();
    assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Format(_))));
}
