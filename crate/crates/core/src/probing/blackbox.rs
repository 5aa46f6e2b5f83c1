use super::outputs::check_probability_blocks;
use super::QuerySet;
use crate::datasets::hwc_batch_to_nchw;
use crate::error::{Error, Result};
use crate::modelzoo::TrainedModel;
use crate::nn::{loss, LayerGraph};

/// A model reachable only through its probability outputs.
pub trait BlackBox: Send + Sync {
    /// Probability rows for `images`, each a flattened `[H, W, channels]`
    /// image.
    fn query(&self, images: &[Vec<f32>], shape: [usize; 3]) -> Result<Vec<Vec<f32>>>;
}

/// In-process black box around a trained graph.
pub struct LocalBlackBox {
    graph: LayerGraph,
}

impl LocalBlackBox {
    pub fn new(model: TrainedModel) -> Self {
        Self { graph: model.graph }
    }

    pub fn from_graph(graph: LayerGraph) -> Self {
        Self { graph }
    }

    /// `[H, W, channels]` accepted by the wrapped model.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.graph.input_shape();
        [s[1], s[2], s[0]]
    }
}

impl BlackBox for LocalBlackBox {
    fn query(&self, images: &[Vec<f32>], shape: [usize; 3]) -> Result<Vec<Vec<f32>>> {
        query_graph(&self.graph, images, shape)
    }
}

impl BlackBox for TrainedModel {
    fn query(&self, images: &[Vec<f32>], shape: [usize; 3]) -> Result<Vec<Vec<f32>>> {
        query_graph(&self.graph, images, shape)
    }
}

fn query_graph(graph: &LayerGraph, images: &[Vec<f32>], shape: [usize; 3]) -> Result<Vec<Vec<f32>>> {
    let s = graph.input_shape();
    let expected = [s[1], s[2], s[0]];
    if shape != expected {
        return Err(Error::shape("black-box query image", &expected, &shape));
    }
    let n: usize = shape.iter().product();
    if let Some(bad) = images.iter().find(|i| i.len() != n) {
        return Err(Error::shape("black-box query image length", &[n], &[bad.len()]));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
    let [h, w, c] = shape;
    let probs = loss::softmax(&graph.infer(&hwc_batch_to_nchw(&refs, h, w, c))?)?;
    Ok((0..probs.batch()).map(|i| probs.row(i).to_vec()).collect())
}

/// Submits the pinned query set and returns the concatenated `N·C` vector.
pub fn query_black_box(bb: &dyn BlackBox, q: &QuerySet, pinned_hash: &str) -> Result<Vec<f32>> {
    q.ensure_hash(pinned_hash)?;
    let images: Vec<Vec<f32>> = (0..q.len()).map(|i| q.image(i).to_vec()).collect();
    let rows = bb.query(&images, q.shape)?;
    if rows.len() != q.len() {
        return Err(Error::BlackBox(format!(
            "expected {} answers, got {}",
            q.len(),
            rows.len()
        )));
    }
    let c = rows.first().map_or(0, Vec::len);
    if c == 0 || rows.iter().any(|r| r.len() != c) {
        return Err(Error::BlackBox("answers have inconsistent class counts".into()));
    }
    let vector: Vec<f32> = rows.into_iter().flatten().collect();
    check_probability_blocks(&vector, q.len(), c)?;
    Ok(vector)
}

/// Keeps the classes of `schema_classes` (in that order) out of a vector
/// whose blocks follow `bb_classes`, renormalizing every block.
pub fn align_classes(vector: &[f32], bb_classes: &[String], schema_classes: &[String]) -> Result<Vec<f32>> {
    let c = bb_classes.len();
    if c == 0 || vector.len() % c != 0 {
        return Err(Error::shape("black-box vector", &[c], &[vector.len()]));
    }
    let picks: Vec<usize> = schema_classes
        .iter()
        .map(|s| {
            bb_classes
                .iter()
                .position(|b| b == s)
                .ok_or_else(|| Error::Config(format!("class {s:?} is not emitted by the black box")))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(vector.len() / c * picks.len());
    for block in vector.chunks(c) {
        let sum: f64 = picks.iter().map(|&k| block[k] as f64).sum();
        if sum <= 0.0 {
            return Err(Error::NonProbability(
                "no probability mass on the shared classes".into(),
            ));
        }
        out.extend(picks.iter().map(|&k| (block[k] as f64 / sum) as f32));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_synthetic_domains, SyntheticSpec};
    use crate::nn::{Init, LayerSpec};

    struct Logits;
    impl BlackBox for Logits {
        fn query(&self, images: &[Vec<f32>], _: [usize; 3]) -> Result<Vec<Vec<f32>>> {
            Ok(images.iter().map(|_| vec![2.0, -1.0]).collect())
        }
    }

    fn setup() -> (QuerySet, LocalBlackBox) {
        let d = make_synthetic_domains(&SyntheticSpec {
            n_domains: 2,
            classes: 3,
            n_per_class: 4,
            image_size: 4,
            style_shift: 0.5,
            seed: 0,
        })
        .unwrap();
        let q = QuerySet::build(&[&d[0], &d[1]], 6, 0).unwrap();
        let g = LayerGraph::build(
            "f",
            &[1, 4, 4],
            &[LayerSpec::Flatten, LayerSpec::Linear { inputs: 16, outputs: 3 }],
            Init::FanIn,
            1,
        )
        .unwrap();
        (q, LocalBlackBox::from_graph(g))
    }

    #[test]
    fn local_vector_is_normalized_and_pinned() {
        let (q, bb) = setup();
        let v = query_black_box(&bb, &q, &q.hash).unwrap();
        assert_eq!(v.len(), 18);
        assert!(check_probability_blocks(&v, 6, 3).is_ok());
        assert!(matches!(
            query_black_box(&bb, &q, "other"),
            Err(Error::QueryHashMismatch { .. })
        ));
    }

    #[test]
    fn logits_endpoint_is_a_non_probability_output() {
        let (q, _) = setup();
        let err = query_black_box(&Logits, &q, &q.hash).unwrap_err();
        assert!(err.to_string().contains("non-probability output"), "{err}");
    }

    #[test]
    fn alignment_slices_and_renormalizes() {
        let bb: Vec<String> = ["cat", "dog", "car"].iter().map(|s| s.to_string()).collect();
        let ours: Vec<String> = ["dog", "cat"].iter().map(|s| s.to_string()).collect();
        let v = align_classes(&[0.2, 0.6, 0.2, 0.5, 0.0, 0.5], &bb, &ours).unwrap();
        let expect = [0.75, 0.25, 0.0, 1.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
