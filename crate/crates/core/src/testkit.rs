//! Synthetic output matrices for tests and benchmarks: rows whose
//! probability blocks depend on the attribute labels plus a per-domain
//! distortion, without training any CNN.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::softmax_row;
use crate::probing::{OutputMatrix, OutputRowMeta};
use crate::schema::{AttributeAssignment, AttributeSchema};

#[derive(Clone, Debug)]
pub struct SyntheticOutputs {
    pub n_queries: usize,
    pub classes: usize,
    /// Strength of the label-dependent signal.
    pub signal: f32,
    /// Per-row noise standard deviation.
    pub noise: f32,
    pub seed: u64,
}

/// `rows_per_domain` rows for each `(domain, shift)`; `shift` scales a
/// fixed per-domain distortion of the logits.
pub fn synthetic_output_matrix(
    schema: &AttributeSchema,
    domains: &[(&str, f32)],
    rows_per_domain: usize,
    spec: &SyntheticOutputs,
) -> OutputMatrix {
    let nc = spec.n_queries * spec.classes;
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let effects: Vec<Vec<Vec<f32>>> = schema
        .cardinalities()
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| (0..nc).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let mut out = OutputMatrix::new(spec.n_queries, spec.classes, format!("synthetic-{}", spec.seed));
    let cards = schema.cardinalities();
    for (d, &(name, shift)) in domains.iter().enumerate() {
        let mut drng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0xD0 + d as u64) << 32);
        let distortion: Vec<f32> = (0..nc).map(|_| normal.sample(&mut drng)).collect();
        for r in 0..rows_per_domain {
            let a: Vec<usize> = cards.iter().map(|&n| rng.gen_range(0..n)).collect();
            let mut logits = vec![0.0f32; nc];
            for (i, l) in logits.iter_mut().enumerate() {
                let sig: f32 = a.iter().enumerate().map(|(k, &v)| effects[k][v][i]).sum();
                *l = spec.signal * sig + shift * distortion[i] + spec.noise * normal.sample(&mut rng);
            }
            let mut v = vec![0.0f32; nc];
            for (lb, vb) in logits.chunks(spec.classes).zip(v.chunks_mut(spec.classes)) {
                softmax_row(lb, vb);
            }
            out.push(
                OutputRowMeta {
                    model_id: format!("{name}-{r}"),
                    domain: name.to_string(),
                    assignment: AttributeAssignment(a),
                },
                v,
            )
            .expect("softmax blocks are normalized");
        }
    }
    out
}

/// A small in-memory model pool: `counts` white boxes per domain on tiny
/// synthetic images, trained for one epoch. Returns the pool and the
/// datasets it was trained on.
pub fn tiny_pool(
    n_domains: usize,
    counts: crate::schema::SplitCounts,
    seed: u64,
) -> (crate::evalkit::ModelPool, Vec<crate::datasets::DomainDataset>) {
    use crate::datasets::{make_synthetic_domains, SyntheticSpec};
    use crate::evalkit::{ModelPool, PooledModel};
    use crate::modelzoo::{train_white_box, ArchConfig, TrainBudget};
    use crate::schema::{enumerate_grid, sample_modelset};

    let schema = AttributeSchema::from_json(include_str!("../../../assets/schemas/desk24.json")).expect("schema");
    let data = make_synthetic_domains(&SyntheticSpec {
        n_domains,
        classes: 3,
        n_per_class: 12,
        image_size: 8,
        style_shift: 1.0,
        seed,
    })
    .expect("synthetic domains");
    let arch = ArchConfig {
        first_channels: 2,
        max_channels: 4,
        fc_hidden: 8,
        dropout: 0.1,
    };
    let budget = TrainBudget {
        epochs: 1,
        ..Default::default()
    };
    let grid = enumerate_grid(&schema).expect("grid");
    let mut models = Vec::new();
    for (i, d) in data.iter().enumerate() {
        let split = sample_modelset(&grid, 2, counts, seed + i as u64, &d.name, false).expect("modelset");
        for (role, spec) in split.with_roles() {
            let model = train_white_box(spec, &schema, d, &arch, &budget).expect("white box");
            models.push(PooledModel { role, model });
        }
    }
    (ModelPool::new(schema, models).expect("pool"), data)
}
