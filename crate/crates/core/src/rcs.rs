//! RoI-level supervised contrastive separation.
//!
//! Ground-truth boxes are pooled from their assigned pyramid level with
//! RoIAlign, averaged spatially, projected linearly and L2-normalised into
//! embeddings `z`. A supervised contrastive loss pulls same-class embeddings
//! together and pushes other classes away, with a FIFO memory queue of past
//! embeddings supplying extra negatives.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{assign_fpn_level, roi_align, BBox, FeaturePyramid};
use crate::numeric::probe::{self, Aux};
use crate::numeric::{ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcsConfig {
    pub enabled: bool,
    /// RoIAlign output is `grid_size x grid_size`; also drives level assignment.
    pub grid_size: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    /// `K`. Kept small: at this training scale embeddings drift quickly and
    /// a long queue fills the denominator with stale negatives.
    pub queue_capacity: usize,
    /// `λ_rcs` in the total objective.
    pub weight: f64,
}

impl Default for RcsConfig {
    fn default() -> Self {
        RcsConfig {
            enabled: false,
            grid_size: 5,
            embed_dim: 128,
            temperature: 0.1,
            queue_capacity: 64,
            weight: 1.0,
        }
    }
}

impl RcsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!("rcs.temperature must be > 0, got {}", self.temperature)));
        }
        if self.grid_size == 0 || self.embed_dim == 0 {
            return Err(Error::config("rcs.grid_size and rcs.embed_dim must be >= 1"));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::config("rcs.weight must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Batch,
    Queue,
}

/// Unit-length class-labelled embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiEmbedding<T> {
    pub z: Vec<T>,
    pub class_id: usize,
    pub source: Source,
}

/// Fixed-capacity FIFO of detached embeddings.
#[derive(Debug, Clone)]
pub struct MemoryQueue<T> {
    capacity: usize,
    entries: VecDeque<RoiEmbedding<T>>,
}

impl<T: Real> MemoryQueue<T> {
    pub fn new(capacity: usize) -> Self {
        MemoryQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &RoiEmbedding<T>> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> &RoiEmbedding<T> {
        &self.entries[i]
    }

    /// Append snapshots, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, embeddings: &[RoiEmbedding<T>]) {
        if self.capacity == 0 {
            return;
        }
        for e in embeddings {
            self.entries.push_back(RoiEmbedding {
                z: e.z.clone(),
                class_id: e.class_id,
                source: Source::Queue,
            });
            while self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
    }
}

/// Linear projection from pooled RoI features to the embedding space.
#[derive(Debug, Clone)]
pub struct RcsHead<T> {
    pub store: ParamStore<T>,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl<T: Real> RcsHead<T> {
    pub fn new(in_dim: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let weight = store.add_he("rcs.proj.weight", &[embed_dim, in_dim], in_dim, rng);
        let bias = store.add("rcs.proj.bias", Tensor::zeros(vec![embed_dim]));
        RcsHead { store, weight, bias }
    }

    pub fn embed_dim(&self) -> usize {
        self.store.get(self.weight).tensor.shape()[0]
    }
}

/// Embeddings of the current batch as an `M x D` tape node.
#[derive(Debug, Clone)]
pub struct EmbeddedRois {
    pub z: Var,
    pub classes: Vec<usize>,
    /// `(image index, box index)` of each row.
    pub origin: Vec<(usize, usize)>,
}

impl EmbeddedRois {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Detached snapshots of every row.
    pub fn embeddings<T: Real>(&self, tape: &Tape<T>) -> Vec<RoiEmbedding<T>> {
        let z = tape.value(self.z);
        let d = z.shape()[1];
        z.data()
            .chunks(d)
            .zip(&self.classes)
            .map(|(row, &class_id)| RoiEmbedding {
                z: row.to_vec(),
                class_id,
                source: Source::Batch,
            })
            .collect()
    }
}

/// Pool each ground-truth box from its assigned level, project and
/// normalise. `gt[n]` holds the boxes of image `n`. Boxes are clipped to the
/// image; those that collapse are skipped. Returns `None` when no box
/// survives.
pub fn embed_rois<T: Real>(
    tape: &mut Tape<T>,
    pyramid: &FeaturePyramid,
    gt: &[Vec<BBox>],
    cfg: &RcsConfig,
    head: &RcsHead<T>,
) -> Result<Option<EmbeddedRois>> {
    probe::aux(Aux::Rcs);
    let (img_h, img_w) = pyramid.image_size(tape)?;
    let mut pooled = Vec::new();
    let mut classes = Vec::new();
    let mut origin = Vec::new();
    for (n, boxes) in gt.iter().enumerate() {
        for (bi, b) in boxes.iter().enumerate() {
            let Some(b) = b.clip(img_w as f64, img_h as f64) else { continue };
            let level = assign_fpn_level(&b, &pyramid.spec, cfg.grid_size);
            let stride = pyramid.spec.stride_of(level);
            let Some(patch) = roi_align(tape, pyramid.level(level), n, &b, cfg.grid_size, stride)? else {
                continue;
            };
            pooled.push(tape.global_avg_pool(patch)?);
            classes.push(b.class_id);
            origin.push((n, bi));
        }
    }
    if pooled.is_empty() {
        return Ok(None);
    }
    let features = tape.concat_rows(&pooled)?;
    let w = tape.param(&head.store, head.weight);
    let bias = tape.param(&head.store, head.bias);
    let projected = tape.linear(features, w, bias)?;
    let z = tape.l2_normalize(projected)?;
    Ok(Some(EmbeddedRois { z, classes, origin }))
}

/// A candidate in an anchor's softmax denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Member {
    Batch(usize),
    Queue(usize),
}

/// Positive and candidate sets for every anchor of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub classes: Vec<usize>,
    /// `P(i)`: other current-batch rows of the anchor's class.
    pub positives: Vec<Vec<usize>>,
    /// `A(i)`: every other current-batch row, plus queue entries of a
    /// different class.
    pub candidates: Vec<Vec<Member>>,
}

pub fn build_sets<T: Real>(classes: &[usize], queue: &MemoryQueue<T>) -> ContrastiveBatch {
    let m = classes.len();
    let mut positives = Vec::with_capacity(m);
    let mut candidates = Vec::with_capacity(m);
    for (i, &ci) in classes.iter().enumerate() {
        positives.push((0..m).filter(|&j| j != i && classes[j] == ci).collect());
        let mut a: Vec<Member> = (0..m).filter(|&j| j != i).map(Member::Batch).collect();
        a.extend(
            queue
                .entries()
                .enumerate()
                .filter(|(_, e)| e.class_id != ci)
                .map(|(q, _)| Member::Queue(q)),
        );
        candidates.push(a);
    }
    ContrastiveBatch {
        classes: classes.to_vec(),
        positives,
        candidates,
    }
}

/// Supervised contrastive loss averaged over anchors with at least one
/// positive:
///
/// `L_i = -1/|P(i)| Σ_{p∈P(i)} log( exp(z_i·z_p/τ) / Σ_{a∈A(i)} exp(z_i·z_a/τ) )`
///
/// `z` is the `M x D` batch embedding node. Queue entries are constants. With
/// no valid anchor the result is an exact zero that carries no gradient.
pub fn supcon_loss<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    cb: &ContrastiveBatch,
    queue: &MemoryQueue<T>,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!("temperature must be > 0, got {temperature}")));
    }
    let zt = tape.value(z);
    let (m, d) = match zt.shape() {
        &[m, d] => (m, d),
        other => return Err(Error::config(format!("supcon_loss expects M x D embeddings, got {other:?}"))),
    };
    if m != cb.classes.len() {
        return Err(Error::config("contrastive batch does not match embedding rows"));
    }
    let valid: Vec<usize> = (0..m).filter(|&i| !cb.positives[i].is_empty()).collect();
    if valid.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let inv_tau = T::one() / T::lit(temperature);
    let rows: Vec<&[T]> = zt.data().chunks(d).collect();
    let member = |mb: Member| -> &[T] {
        match mb {
            Member::Batch(j) => rows[j],
            Member::Queue(q) => &queue.get(q).z,
        }
    };
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();

    let scale = T::one() / T::lit(valid.len() as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); m * d];
    let mut logits = Vec::new();
    for &i in &valid {
        let zi = rows[i];
        logits.clear();
        logits.extend(cb.candidates[i].iter().map(|&a| dot(zi, member(a)) * inv_tau));
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let denom: T = logits.iter().map(|&s| (s - max).exp()).sum();
        let lse = max + denom.ln();
        let pos = &cb.positives[i];
        let inv_p = T::one() / T::lit(pos.len() as f64);
        let pos_mean = pos.iter().map(|&p| dot(zi, rows[p])).sum::<T>() * inv_tau * inv_p;
        total = total + (lse - pos_mean);

        // dL_i/dz_i = Σ_a softmax_a z_a/τ − mean_p z_p/τ; symmetric terms to batch members.
        for (&a, &s) in cb.candidates[i].iter().zip(logits.iter()) {
            let w = (s - lse).exp() * inv_tau * scale;
            let za = member(a);
            for k in 0..d {
                grad[i * d + k] = grad[i * d + k] + w * za[k];
            }
            if let Member::Batch(j) = a {
                for k in 0..d {
                    grad[j * d + k] = grad[j * d + k] + w * zi[k];
                }
            }
        }
        let wp = inv_tau * inv_p * scale;
        for &p in pos {
            for k in 0..d {
                grad[i * d + k] = grad[i * d + k] - wp * rows[p][k];
                grad[p * d + k] = grad[p * d + k] - wp * zi[k];
            }
        }
    }
    let value = total * scale;
    let g = Tensor::from_vec(vec![m, d], grad)?;
    tape.fused_scalar("supcon_loss", value, vec![z], vec![Some(g)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assume, proptest, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn loss_of(rows: &[Vec<f64>], classes: &[usize], queue: &MemoryQueue<f64>, tau: f64) -> f64 {
        let d = rows[0].len();
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_vec(vec![rows.len(), d], rows.concat()).unwrap());
        let cb = build_sets(classes, queue);
        let l = supcon_loss(&mut tape, z, &cb, queue, tau).unwrap();
        tape.value(l).item()
    }

    fn emb(z: Vec<f64>, class_id: usize) -> RoiEmbedding<f64> {
        RoiEmbedding { z, class_id, source: Source::Batch }
    }

    #[test]
    fn build_sets_examples() {
        let empty = MemoryQueue::<f64>::new(4);
        let cb = build_sets(&[0, 0], &empty);
        assert_eq!(cb.positives[0], vec![1]);
        assert_eq!(cb.candidates[0], vec![Member::Batch(1)]);

        let cb = build_sets(&[2], &empty);
        assert!(cb.positives[0].is_empty());

        let mut q = MemoryQueue::new(4);
        q.push(&[emb(vec![1.0, 0.0], 0), emb(vec![0.0, 1.0], 1)]);
        let cb = build_sets(&[0, 1], &q);
        assert_eq!(cb.candidates[0], vec![Member::Batch(1), Member::Queue(1)]);
        assert!(cb.positives[0].is_empty());
    }

    #[test]
    fn sets_respect_membership_invariants() {
        let mut q = MemoryQueue::new(8);
        q.push(&[emb(vec![1.0], 0), emb(vec![1.0], 1), emb(vec![1.0], 2)]);
        let classes = [0, 1, 0, 2, 1, 1];
        let cb = build_sets(&classes, &q);
        for (i, &class) in classes.iter().enumerate() {
            assert!(!cb.candidates[i].contains(&Member::Batch(i)));
            for &p in &cb.positives[i] {
                assert!(cb.candidates[i].contains(&Member::Batch(p)));
            }
            for a in &cb.candidates[i] {
                if let Member::Queue(qi) = a {
                    assert_ne!(q.get(*qi).class_id, class);
                }
            }
        }
    }

    #[test]
    fn lone_positive_gives_zero() {
        let q = MemoryQueue::new(0);
        let l = loss_of(&[vec![0.6, 0.8], vec![0.0, 1.0]], &[1, 1], &q, 0.1);
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn closed_form_with_one_orthogonal_negative() {
        let q = MemoryQueue::new(0);
        let rows = [vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        // Anchors 0 and 1 each see the other as positive and row 2 as an
        // orthogonal negative. Row 2 has no positive and is skipped.
        let l = loss_of(&rows, &[0, 0, 1], &q, 1.0);
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((want - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn no_valid_anchor_is_an_exact_constant_zero() {
        let q = MemoryQueue::new(0);
        let mut tape = Tape::<f64>::new();
        let mut store = ParamStore::new();
        let id = store.add("z", Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let z = tape.param(&store, id);
        let cb = build_sets(&[0, 1], &q);
        let l = supcon_loss(&mut tape, z, &cb, &q, 0.1).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(tape.backward(l).unwrap().is_empty());
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let q = MemoryQueue::<f64>::new(0);
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let cb = build_sets(&[0, 0], &q);
        assert!(matches!(supcon_loss(&mut tape, z, &cb, &q, 0.0), Err(Error::Config(_))));
        assert!(RcsConfig { temperature: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn queue_is_fifo_with_capacity() {
        let mut q = MemoryQueue::new(2);
        q.push(&[emb(vec![1.0], 0), emb(vec![2.0], 1), emb(vec![3.0], 2)]);
        let zs: Vec<f64> = q.entries().map(|e| e.z[0]).collect();
        assert_eq!(zs, vec![2.0, 3.0]);
        assert!(q.entries().all(|e| e.source == Source::Queue));

        let mut off = MemoryQueue::new(0);
        off.push(&[emb(vec![1.0], 0)]);
        assert!(off.is_empty());
    }

    #[test]
    fn queue_snapshots_are_bit_exact() {
        let z = vec![0.1f32, -0.7, 0.3];
        let mut q = MemoryQueue::new(4);
        q.push(&[RoiEmbedding { z: z.clone(), class_id: 1, source: Source::Batch }]);
        assert_eq!(q.get(0).z, z);
    }

    #[test]
    fn empty_queue_reduces_to_batch_only() {
        let rows = [unit(&[1.0, 0.2]), unit(&[0.9, -0.1]), unit(&[-0.3, 1.0])];
        let disabled = MemoryQueue::new(0);
        let empty = MemoryQueue::new(16);
        assert_eq!(loss_of(&rows, &[0, 0, 1], &disabled, 0.2), loss_of(&rows, &[0, 0, 1], &empty, 0.2));
    }

    #[test]
    fn lower_temperature_is_more_sensitive() {
        // Positive at ~60 degrees, a negative closer than the positive.
        let rows = [unit(&[1.0, 0.0]), unit(&[0.5, 0.866]), unit(&[0.95, 0.3])];
        let q = MemoryQueue::new(0);
        let classes = [0, 0, 1];
        assert!(loss_of(&rows, &classes, &q, 0.05) > loss_of(&rows, &classes, &q, 0.5));
    }

    #[test]
    fn queue_entries_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut q = MemoryQueue::new(4);
        let qrows: Vec<RoiEmbedding<f64>> = (0..4)
            .map(|c| emb(unit(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]), c % 2))
            .collect();
        q.push(&qrows);
        let before: Vec<_> = q.entries().cloned().collect();
        let mut store = ParamStore::new();
        let id = store.add("z", Tensor::from_vec(vec![3, 2], [unit(&[1.0, 0.1]), unit(&[0.8, 0.5]), unit(&[0.0, 1.0])].concat()).unwrap());
        let mut tape = Tape::new();
        let z = tape.param(&store, id);
        let cb = build_sets(&[0, 0, 1], &q);
        let l = supcon_loss(&mut tape, z, &cb, &q, 0.1).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.get(id).is_some());
        let after: Vec<_> = q.entries().cloned().collect();
        assert_eq!(before, after);
    }

    fn pyramid_on(tape: &mut Tape<f64>, store: &ParamStore<f64>, ids: &[ParamId]) -> FeaturePyramid {
        FeaturePyramid {
            spec: crate::geometry::PyramidSpec::standard(3),
            levels: ids.iter().map(|&id| tape.param(store, id)).collect(),
        }
    }

    #[test]
    fn whole_map_box_on_constant_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = RcsHead::<f64>::new(3, 4, &mut rng);
        let c = [0.5, -1.0, 2.0];
        let mut fs = ParamStore::new();
        let ids: Vec<ParamId> = [8usize, 4, 2]
            .iter()
            .enumerate()
            .map(|(k, &side)| {
                let data = (0..3).flat_map(|ch| std::iter::repeat_n(c[ch], side * side)).collect();
                fs.add(format!("p{k}"), Tensor::from_vec(vec![1, 3, side, side], data).unwrap())
            })
            .collect();
        let mut tape = Tape::new();
        let pyr = pyramid_on(&mut tape, &fs, &ids);
        let cfg = RcsConfig { grid_size: 5, embed_dim: 4, ..Default::default() };
        // Box covering the whole 64x64 image.
        let b = BBox::new(0.0, 0.0, 64.0, 64.0, 1).unwrap();
        let out = embed_rois(&mut tape, &pyr, &[vec![b]], &cfg, &head).unwrap().unwrap();
        let got = tape.value(out.z).data().to_vec();

        let w = &head.store.get(head.weight).tensor;
        let bias = &head.store.get(head.bias).tensor;
        let lin: Vec<f64> = (0..4)
            .map(|o| bias.data()[o] + (0..3).map(|i| w.data()[o * 3 + i] * c[i]).sum::<f64>())
            .collect();
        let want = unit(&lin);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_features_collapse_to_one_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = RcsHead::<f64>::new(3, 4, &mut rng);
        head.store.get_mut(head.bias).tensor = Tensor::from_vec(vec![4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let mut fs = ParamStore::new();
        let ids: Vec<ParamId> = [8usize, 4, 2]
            .iter()
            .map(|&s| fs.add(format!("p{s}"), Tensor::zeros(vec![1, 3, s, s])))
            .collect();
        let mut tape = Tape::new();
        let pyr = pyramid_on(&mut tape, &fs, &ids);
        let boxes = vec![BBox::new(2.0, 2.0, 20.0, 14.0, 0).unwrap(), BBox::new(30.0, 30.0, 60.0, 61.0, 0).unwrap()];
        let out = embed_rois(&mut tape, &pyr, &[boxes], &RcsConfig::default(), &head).unwrap().unwrap();
        let z = tape.value(out.z).data().to_vec();
        let (a, b) = z.split_at(4);
        let sim: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        assert!((sim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_boxes_embed_to_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = RcsHead::<f64>::new(3, 4, &mut rng);
        let mut fs = ParamStore::new();
        let ids: Vec<ParamId> = [8usize, 4, 2].iter().map(|&s| fs.add(format!("p{s}"), Tensor::zeros(vec![1, 3, s, s]))).collect();
        let mut tape = Tape::new();
        let pyr = pyramid_on(&mut tape, &fs, &ids);
        assert!(embed_rois(&mut tape, &pyr, &[vec![]], &RcsConfig::default(), &head).unwrap().is_none());
    }

    #[test]
    fn gradcheck_through_embedding() {
        use crate::numeric::{gradcheck, GradcheckOptions};
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut store = ParamStore::<f64>::new();
            let ids: Vec<ParamId> = [8usize, 4, 2]
                .iter()
                .map(|&s| {
                    let data = (0..2 * 3 * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    store.add(format!("p{s}"), Tensor::from_vec(vec![2, 3, s, s], data).unwrap())
                })
                .collect();
            let weight = store.add_he("w", &[4, 3], 3, &mut rng);
            let bias = store.add("b", Tensor::from_vec(vec![4], (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap());
            let gt = vec![
                vec![BBox::new(3.1, 4.2, 25.7, 19.9, 0).unwrap(), BBox::new(10.0, 30.5, 40.2, 62.0, 1).unwrap()],
                vec![BBox::new(1.3, 2.2, 50.1, 47.8, 0).unwrap(), BBox::new(33.0, 12.0, 45.5, 29.0, 1).unwrap()],
            ];
            let cfg = RcsConfig { grid_size: 3, embed_dim: 4, temperature: 0.5, ..Default::default() };
            let queue = MemoryQueue::new(0);
            let report = gradcheck(
                &mut store,
                |tape, s| {
                    let head = RcsHead { store: s.clone(), weight, bias };
                    let pyr = pyramid_on(tape, s, &ids);
                    let e = embed_rois(tape, &pyr, &gt, &cfg, &head)?.expect("boxes survive");
                    let cb = build_sets(&e.classes, &queue);
                    supcon_loss(tape, e.z, &cb, &queue, cfg.temperature)
                },
                GradcheckOptions { seed, max_coords: Some(60), ..Default::default() },
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }

    fn arb_batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (3usize..9).prop_flat_map(|m| {
            (
                proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, 4), m),
                proptest::collection::vec(0usize..3, m),
            )
        })
        .prop_map(|(rows, classes)| {
            let rows = rows
                .into_iter()
                .map(|mut r| {
                    r[0] += 0.05;
                    unit(&r)
                })
                .collect();
            (rows, classes)
        })
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative((rows, classes) in arb_batch(), tau in 0.05..1.0f64) {
            let q = MemoryQueue::new(0);
            prop_assert!(loss_of(&rows, &classes, &q, tau) >= -1e-12);
        }

        #[test]
        fn permutation_invariant((rows, classes) in arb_batch(), shift in 1usize..5) {
            let q = MemoryQueue::new(0);
            let m = rows.len();
            let perm: Vec<usize> = (0..m).map(|i| (i * 7 + shift) % m).collect();
            let mut seen = perm.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assume!(seen.len() == m);
            let prow: Vec<_> = perm.iter().map(|&i| rows[i].clone()).collect();
            let pcls: Vec<_> = perm.iter().map(|&i| classes[i]).collect();
            let a = loss_of(&rows, &classes, &q, 0.1);
            let b = loss_of(&prow, &pcls, &q, 0.1);
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }

        #[test]
        fn rotation_invariant((rows, classes) in arb_batch(), theta in 0.0..std::f64::consts::TAU, phi in 0.0..std::f64::consts::TAU) {
            let q = MemoryQueue::new(0);
            // Orthogonal map: rotate coords (0,1) by theta and (2,3) by phi.
            let rot = |r: &Vec<f64>| {
                let (c1, s1, c2, s2) = (theta.cos(), theta.sin(), phi.cos(), phi.sin());
                vec![c1 * r[0] - s1 * r[1], s1 * r[0] + c1 * r[1], c2 * r[2] - s2 * r[3], s2 * r[2] + c2 * r[3]]
            };
            let rrows: Vec<_> = rows.iter().map(rot).collect();
            let a = loss_of(&rows, &classes, &q, 0.1);
            let b = loss_of(&rrows, &classes, &q, 0.1);
            prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
    }
}
