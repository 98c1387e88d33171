use glcon_core::augment::{make_views, sample_key, AugmentationConfig};
use glcon_core::data::{Batch, Image, ReportRecord};
use glcon_core::encoders::{Init, Vocab};
use glcon_core::losses::{LocalObjective, LossWeights, SentenceReduction};
use glcon_core::model::{Model, ModelConfig, ObjectiveSettings};
use glcon_core::numeric::{cosine, Segments, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CORPUS: &[&str] = &[
    "Shows small alpha-opacity.",
    "No beta-mass.",
    "There is a thin gamma-streak.",
    "Possibly indicates delta-band.",
    "No evidence of zeta-cross.",
];

fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        image_stages: vec![4, 8],
        d_enc: 8,
        d_proj: 8,
        d_ss: 8,
        ..ModelConfig::default()
    }
}

fn model(seed: u64) -> Model {
    Model::new(&small_config(), Vocab::build(CORPUS.iter().copied()), seed).unwrap()
}

fn noise_image(rng: &mut impl Rng, size: usize) -> Image {
    Image::new(size, size, 1, (0..size * size).map(|_| rng.random()).collect()).unwrap()
}

fn records(rng: &mut impl Rng, lengths: &[usize]) -> Vec<ReportRecord> {
    lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let sentences = (0..n).map(|k| CORPUS[(i + k) % CORPUS.len()].to_string()).collect();
            ReportRecord::new(format!("r{i}"), noise_image(rng, 16), sentences, None).unwrap()
        })
        .collect()
}

fn image_embedding(m: &Model, images: &[&Image]) -> Tensor {
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    (*m.encode_images(&p, &tape, images).unwrap().value()).clone()
}

fn settings(weights: LossWeights) -> ObjectiveSettings {
    ObjectiveSettings {
        weights,
        local_objective: LocalObjective::Asymmetric,
        sentence_reduction: SentenceReduction::Sum,
    }
}

fn objective(
    m: &Model,
    batch: &Batch<'_>,
    views: Option<(&[Image], &[Image])>,
    weights: LossWeights,
) -> glcon_core::losses::LossBreakdown {
    let tape = Tape::new();
    let p = m.params.bind(&tape);
    m.objective(&p, &tape, batch, views, &settings(weights)).unwrap().1
}

#[test]
fn zero_image_embedding_is_finite_and_stable() {
    let m = model(1);
    let zero = Image::filled(16, 16, 1, 0.0).unwrap();
    let a = image_embedding(&m, &[&zero]);
    let b = image_embedding(&m, &[&zero]);
    assert!(a.is_finite());
    assert_eq!(a, b);
}

#[test]
fn distinct_images_give_distinct_embeddings() {
    let m = model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images: Vec<Image> = (0..2000).map(|_| noise_image(&mut rng, 16)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let z = image_embedding(&m, &refs);
    for pair in 0..1000 {
        assert_ne!(z.row_slice(2 * pair), z.row_slice(2 * pair + 1), "pair {pair}");
    }
}

#[test]
fn single_pixel_change_moves_embedding() {
    let m = model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = noise_image(&mut rng, 16);
    for (y, x) in [(0, 0), (7, 9), (15, 15)] {
        let mut px = img.pixels().to_vec();
        px[y * 16 + x] = 1.0 - px[y * 16 + x];
        let changed = Image::new(16, 16, 1, px).unwrap();
        let z = image_embedding(&m, &[&img, &changed]);
        assert_ne!(z.row_slice(0), z.row_slice(1), "pixel ({y}, {x})");
    }
}

fn sentence_embedding(m: &Model, sentences: &[&str]) -> Tensor {
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    (*m.encode_sentences(&p, &tape, sentences).unwrap().value()).clone()
}

#[test]
fn text_encoder_probes() {
    let m = model(6);
    let z = sentence_embedding(&m, &["No beta-mass.", "No beta-mass."]);
    assert_eq!(z.row_slice(0), z.row_slice(1));

    let unknown = sentence_embedding(&m, &["qwerty zxcv"]);
    assert!(unknown.is_finite());

    let z = sentence_embedding(&m, &["shows small alpha-opacity", "alpha-opacity small shows"]);
    assert_ne!(z.row_slice(0), z.row_slice(1));
}

fn pool(m: &Model, z: &Tensor, lengths: &[usize]) -> (Tensor, Tensor) {
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let segs = Segments::from_lengths(lengths).unwrap();
    let (pooled, w) = m.pool(&p, &tape.constant(z.clone()), &segs).unwrap();
    ((*pooled.value()).clone(), (*w.value()).clone())
}

fn affine(m: &Model, x: &[f64], weight: glcon_core::numeric::ParamId, bias: glcon_core::numeric::ParamId) -> Vec<f64> {
    let w = &m.params.get(weight).tensor;
    let b = &m.params.get(bias).tensor;
    let (din, dout) = w.dims2().unwrap();
    (0..dout)
        .map(|j| b.data()[j] + (0..din).map(|i| x[i] * w.at(i, j)).sum::<f64>())
        .collect()
}

#[test]
fn attention_pool_single_sentence_is_its_value_projection() {
    let m = model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = Tensor::new(&[1, 8], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (pooled, w) = pool(&m, &z, &[1]);
    assert_eq!(w.data(), &[1.0]);
    let v = affine(&m, z.row_slice(0), m.pool.value.weight, m.pool.value.bias);
    for (a, b) in pooled.data().iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_pool_identical_sentences_share_weight() {
    let m = model(9);
    let row: Vec<f64> = (0..8).map(|i| i as f64 / 8.0).collect();
    let z = Tensor::from_rows(&[row.clone(), row]).unwrap();
    let (_, w) = pool(&m, &z, &[2]);
    assert_eq!(w.data(), &[0.5, 0.5]);
}

#[test]
fn attention_pool_matches_scalar_attention() {
    let m = model(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let z = Tensor::new(&[4, 8], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (pooled, w) = pool(&m, &z, &[4]);
        let q = m.params.get(m.pool.query).tensor.data().to_vec();
        let scores: Vec<f64> = (0..4)
            .map(|i| {
                let k = affine(&m, z.row_slice(i), m.pool.key.weight, m.pool.key.bias);
                k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / 8f64.sqrt()
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = e.iter().sum();
        let mut expected = vec![0.0; 8];
        for i in 0..4 {
            let weight = e[i] / total;
            assert!((w.data()[i] - weight).abs() < 1e-10);
            let v = affine(&m, z.row_slice(i), m.pool.value.weight, m.pool.value.bias);
            for (acc, vj) in expected.iter_mut().zip(v) {
                *acc += weight * vj;
            }
        }
        for (a, b) in pooled.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn identity_heads_pass_inputs_through() {
    let m = Model::with_head_init(&small_config(), Vocab::build(CORPUS.iter().copied()), 12, Init::Identity).unwrap();
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let z = tape.constant(Tensor::new(&[2, 8], (0..16).map(|i| i as f64 - 7.5).collect()).unwrap());
    for head in [&m.heads.global, &m.heads.local, &m.heads.sentence, &m.heads.report] {
        assert_eq!(*head.forward(&p, &z).unwrap().value(), *z.value());
    }
}

#[test]
fn global_and_local_heads_differ() {
    let m = model(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let img = noise_image(&mut rng, 16);
    let (l, g) = m.image_projections(&[&img], 1).unwrap();
    assert_ne!(l, g);
}

#[test]
fn report_gradient_reaches_every_sentence() {
    let m = model(15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let lengths = [3, 1, 4];
    let z = Tensor::new(&[8, 8], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let zs = tape.leaf(z);
    let segs = Segments::from_lengths(&lengths).unwrap();
    let (zr, _) = m.pool(&p, &zs, &segs).unwrap();
    let out = m.heads.report.forward(&p, &zr).unwrap().sum();
    let g = tape.backward(out).unwrap().wrt(zs);
    for i in 0..8 {
        assert!(g.row_slice(i).iter().any(|&v| v != 0.0), "sentence row {i}");
    }
}

#[test]
fn mirrored_with_identity_views_doubles_clean_losses() {
    let m = model(17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let recs = records(&mut rng, &[2, 1, 3]);
    let batch = Batch::new(recs.iter().collect()).unwrap();
    let images: Vec<Image> = recs.iter().map(|r| r.image.clone()).collect();
    let mirrored = objective(&m, &batch, Some((&images, &images)), LossWeights::new(0.0, 0.0, 0.0, 1.0).unwrap());
    let clean = objective(&m, &batch, None, LossWeights::new(1.0, 1.0, 0.0, 0.0).unwrap());
    assert!((mirrored.total - 2.0 * clean.total).abs() < 1e-10, "{} vs {}", mirrored.total, clean.total);
}

#[test]
fn single_pair_objective_terms_vanish() {
    let m = model(19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let recs = records(&mut rng, &[1]);
    let batch = Batch::new(recs.iter().collect()).unwrap();
    let images: Vec<&Image> = recs.iter().map(|r| &r.image).collect();
    let (v1, v2) = make_views(&images, &[sample_key("r0")], &AugmentationConfig::default(), 3, 1).unwrap();
    let parts = objective(&m, &batch, Some((&v1, &v2)), LossWeights::new(1.0, 1.0, 0.0, 1.0).unwrap());
    assert!(parts.local.abs() < 1e-12 && parts.global.abs() < 1e-12 && parts.mirrored.abs() < 1e-12, "{parts:?}");
}

#[test]
fn simsiam_with_identity_views_matches_scalar_cosines() {
    let m = model(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let recs = records(&mut rng, &[1, 2, 1, 1]);
    let batch = Batch::new(recs.iter().collect()).unwrap();
    let images: Vec<Image> = recs.iter().map(|r| r.image.clone()).collect();
    let parts = objective(&m, &batch, Some((&images, &images)), LossWeights::new(0.0, 0.0, 1.0, 0.0).unwrap());

    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let z = m.encode_images(&p, &tape, &images.iter().collect::<Vec<_>>()).unwrap();
    let e = m.heads.encoder.forward(&p, &z).unwrap();
    let pred = m.heads.predictor.forward(&p, &e).unwrap();
    let (e, pred) = (e.value(), pred.value());
    let n = images.len();
    let mean_cos = (0..n).map(|i| cosine(pred.row_slice(i), e.row_slice(i)).unwrap()).sum::<f64>() / n as f64;
    assert!((parts.simsiam + 2.0 * mean_cos).abs() < 1e-10, "{} vs {}", parts.simsiam, -2.0 * mean_cos);
}

#[test]
fn global_only_weights_give_global_loss_exactly() {
    let m = model(23);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let recs = records(&mut rng, &[2, 2, 1]);
    let batch = Batch::new(recs.iter().collect()).unwrap();
    let parts = objective(&m, &batch, None, LossWeights::new(0.0, 1.0, 0.0, 0.0).unwrap());
    assert_eq!(parts.total, parts.global);
    assert!(parts.global > 0.0);
}

#[test]
fn null_objective_is_zero_without_gradient() {
    let m = model(25);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let recs = records(&mut rng, &[2, 1]);
    let batch = Batch::new(recs.iter().collect()).unwrap();
    let tape = Tape::new();
    let p = m.params.bind(&tape);
    let (total, parts) = m
        .objective(&p, &tape, &batch, None, &settings(LossWeights::new(0.0, 0.0, 0.0, 0.0).unwrap()))
        .unwrap();
    assert_eq!(parts.total, 0.0);
    let grads = tape.backward(total).unwrap();
    for g in p.gradients(&grads) {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
