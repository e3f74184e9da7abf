//! Anchor-free heads over the disentangled features, box decoding and
//! class-wise NMS.

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::deform::DisentangledFeatures;
use crate::error::{ensure_eq, Error, Result};
use crate::layers::{ensure_channels, join, ConvLayer, Parameters};
use crate::tensor::{relu, softplus, ConvSpec, Tensor};

/// Output strides of the three pyramid levels.
pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const HEAD_DEPTH: usize = 2;

/// `HEAD_DEPTH` 3x3 convs with ReLU, then a 1x1 projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub convs: Vec<ConvLayer>,
    pub proj: ConvLayer,
}

impl Branch {
    pub fn zeros(channels: usize, out: usize) -> Self {
        Branch {
            convs: (0..HEAD_DEPTH)
                .map(|_| ConvLayer::zeros(channels, channels, ConvSpec::same(3)))
                .collect(),
            proj: ConvLayer::zeros(channels, out, ConvSpec::new(1)),
        }
    }

    /// Activations entering the projection.
    pub fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = relu(&conv.forward(&h)?);
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&self.trunk(x)?)
    }
}

impl Parameters for Branch {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Classification and regression branches, shared by every level.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub cls: Branch,
    pub reg: Branch,
}

impl Head {
    pub fn zeros(channels: usize, num_classes: usize) -> Self {
        Head {
            cls: Branch::zeros(channels, num_classes),
            reg: Branch::zeros(channels, 4),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cls.proj.out_channels()
    }

    pub fn channels(&self) -> usize {
        self.cls.proj.weight.shape().c
    }
}

impl Parameters for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.cls.visit(&join(prefix, "cls"), f);
        self.reg.visit(&join(prefix, "reg"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.cls.visit_mut(&join(prefix, "cls"), f);
        self.reg.visit_mut(&join(prefix, "reg"), f);
    }
}

/// Raw head outputs for one level: class logits and softplus distances in stride units.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLevel {
    pub logits: Tensor,
    pub ltrb: Tensor,
}

pub fn head_forward(feats: &[DisentangledFeatures], head: &Head) -> Result<Vec<HeadLevel>> {
    ensure_eq("head_forward", "reg.out_channels", 4, head.reg.proj.out_channels())?;
    feats
        .iter()
        .map(|f| {
            ensure_channels("head_forward", head.channels(), &f.f_cls)?;
            ensure_channels("head_forward", head.channels(), &f.f_reg)?;
            Ok(HeadLevel {
                logits: head.cls.forward(&f.f_cls)?,
                ltrb: head.reg.forward(&f.f_reg)?.map(softplus),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorPoint {
    pub x: f64,
    pub y: f64,
    pub stride: f64,
}

impl AnchorPoint {
    pub fn at_cell(row: usize, col: usize, stride: usize) -> Self {
        let s = stride as f64;
        AnchorPoint {
            x: (col as f64 + 0.5) * s,
            y: (row as f64 + 0.5) * s,
            stride: s,
        }
    }
}

/// Box from distances to the left, top, right and bottom edges (in stride
/// units), clamped to `[0, width] x [0, height]`. May come out zero-area.
pub fn decode(point: &AnchorPoint, ltrb: [f64; 4], width: f64, height: f64) -> BBox {
    let s = point.stride;
    BBox::new(
        point.x - ltrb[0] * s,
        point.y - ltrb[1] * s,
        point.x + ltrb[2] * s,
        point.y + ltrb[3] * s,
    )
    .clamped(width, height)
}

pub fn is_degenerate(b: &BBox) -> bool {
    !b.is_valid()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Descending score, lower input index first on ties.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy class-wise suppression: a box survives iff its IoU with every
/// already kept box of the same class is at most `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in score_order(dets) {
        let d = &dets[i];
        if kept
            .iter()
            .filter(|k| k.class_id == d.class_id)
            .all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh)
        {
            kept.push(*d);
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_dets: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            score_thresh: 0.05,
            nms_thresh: 0.6,
            max_dets: 100,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_thresh > 0.0 && self.score_thresh < 1.0) {
            return Err(Error::Validation(format!("score_thresh must lie in (0, 1), got {}", self.score_thresh)));
        }
        if !(self.nms_thresh > 0.0 && self.nms_thresh <= 1.0) {
            return Err(Error::Validation(format!("nms_thresh must lie in (0, 1], got {}", self.nms_thresh)));
        }
        if self.max_dets == 0 {
            return Err(Error::Validation("max_dets must be at least 1".into()));
        }
        Ok(())
    }
}

fn sigmoid_f64(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Detections for batch item `n` in the coordinate frame of a `width x height`
/// network input. Candidates are enumerated level, row, column, class.
pub fn postprocess(
    levels: &[HeadLevel],
    strides: &[usize],
    n: usize,
    width: f64,
    height: f64,
    config: &PostprocessConfig,
) -> Result<Vec<Detection>> {
    config.validate()?;
    ensure_eq("postprocess", "levels", strides.len(), levels.len())?;
    let mut candidates = Vec::new();
    for (lvl, &stride) in levels.iter().zip(strides) {
        let ls = lvl.logits.shape();
        let rs = lvl.ltrb.shape();
        ensure_eq("postprocess", "ltrb.c", 4, rs.c)?;
        ensure_eq("postprocess", "h", ls.h, rs.h)?;
        ensure_eq("postprocess", "w", ls.w, rs.w)?;
        if n >= ls.n || n >= rs.n {
            return Err(Error::Index {
                context: "postprocess",
                what: "batch",
                index: n,
                len: ls.n.min(rs.n),
            });
        }
        for row in 0..ls.h {
            for col in 0..ls.w {
                let point = AnchorPoint::at_cell(row, col, stride);
                let mut decoded = None;
                for class_id in 0..ls.c {
                    let score = sigmoid_f64(lvl.logits.at(n, class_id, row, col) as f64);
                    if score <= config.score_thresh {
                        continue;
                    }
                    let bbox = *decoded.get_or_insert_with(|| {
                        let d = |c| lvl.ltrb.at(n, c, row, col) as f64;
                        decode(&point, [d(0), d(1), d(2), d(3)], width, height)
                    });
                    if !is_degenerate(&bbox) {
                        candidates.push(Detection { bbox, class_id, score });
                    }
                }
            }
        }
    }
    let mut kept = nms(&candidates, config.nms_thresh);
    kept.truncate(config.max_dets);
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, Shape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2),
            class_id,
            score,
        }
    }

    fn randomize(head: &mut Head, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        head.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3)));
    }

    #[test]
    fn zero_head_outputs() {
        let head = Head::zeros(8, 2);
        let f = Tensor::full(Shape::new(1, 8, 5, 4), 0.7);
        let out = head_forward(&[DisentangledFeatures { f_cls: f.clone(), f_reg: f }], &head).unwrap();
        assert_eq!(out[0].logits.shape(), Shape::new(1, 2, 5, 4));
        assert_eq!(out[0].ltrb.shape(), Shape::new(1, 4, 5, 4));
        assert!(out[0].logits.data().iter().all(|&v| v == 0.0));
        let ln2 = std::f32::consts::LN_2;
        assert!(out[0].ltrb.data().iter().all(|&v| (v - ln2).abs() < 1e-7));
    }

    #[test]
    fn symmetric_branches_share_trunk_activations() {
        let mut head = Head::zeros(6, 4);
        randomize(&mut head, 2);
        head.reg.convs = head.cls.convs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::random_uniform(Shape::new(1, 6, 7, 7), -1.0, 1.0, &mut rng);
        assert_eq!(head.cls.trunk(&f).unwrap(), head.reg.trunk(&f).unwrap());
    }

    #[test]
    fn matches_composition_oracle() {
        let mut head = Head::zeros(6, 3);
        randomize(&mut head, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fc = Tensor::random_uniform(Shape::new(1, 6, 9, 8), -1.0, 1.0, &mut rng);
        let fr = Tensor::random_uniform(Shape::new(1, 6, 9, 8), -1.0, 1.0, &mut rng);
        let out = head_forward(&[DisentangledFeatures { f_cls: fc.clone(), f_reg: fr.clone() }], &head).unwrap();

        let run = |b: &Branch, x: &Tensor| {
            let mut h = x.clone();
            for c in &b.convs {
                h = conv2d(&h, &c.weight, Some(&c.bias), ConvSpec::same(3)).unwrap().map(|v| v.max(0.0));
            }
            conv2d(&h, &b.proj.weight, Some(&b.proj.bias), ConvSpec::new(1)).unwrap()
        };
        let logits = run(&head.cls, &fc);
        let ltrb = run(&head.reg, &fr).map(|v| (1.0 + (v as f64).exp()).ln() as f32);
        assert!(out[0].logits.max_abs_diff(&logits) <= 1e-5);
        assert!(out[0].ltrb.max_abs_diff(&ltrb) <= 1e-5);
    }

    #[test]
    fn head_rejects_wrong_width() {
        let head = Head::zeros(8, 1);
        let f = Tensor::zeros(Shape::new(1, 4, 3, 3));
        let err = head_forward(&[DisentangledFeatures { f_cls: f.clone(), f_reg: f }], &head);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn decode_examples() {
        let p = AnchorPoint::at_cell(1, 1, 8);
        assert_eq!((p.x, p.y), (12.0, 12.0));
        let p = AnchorPoint { x: 16.0, y: 16.0, stride: 8.0 };
        assert_eq!(decode(&p, [1.0; 4], 100.0, 100.0), BBox::new(8.0, 8.0, 24.0, 24.0));
        let flat = decode(&p, [0.0; 4], 100.0, 100.0);
        assert!(is_degenerate(&flat));
        let edge = AnchorPoint { x: 4.0, y: 396.0, stride: 8.0 };
        assert_eq!(decode(&edge, [10.0; 4], 400.0, 400.0), BBox::new(0.0, 316.0, 84.0, 400.0));
    }

    #[test]
    fn decode_inverts_measured_distances() {
        let p = AnchorPoint::at_cell(6, 9, 16);
        let b = BBox::new(101.0, 80.5, 190.0, 130.25);
        let ltrb = [(p.x - b.x1) / 16.0, (p.y - b.y1) / 16.0, (b.x2 - p.x) / 16.0, (b.y2 - p.y) / 16.0];
        let back = decode(&p, ltrb, 400.0, 400.0);
        for (a, e) in [back.x1, back.y1, back.x2, back.y2].iter().zip([b.x1, b.y1, b.x2, b.y2]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn nms_examples() {
        let disjoint = [det(0.0, 0.0, 1.0, 1.0, 0, 0.5), det(5.0, 5.0, 6.0, 6.0, 0, 0.9)];
        let kept = nms(&disjoint, 0.6);
        assert_eq!(kept, vec![disjoint[1], disjoint[0]]);
        let same = [det(0.0, 0.0, 4.0, 4.0, 0, 0.8), det(0.0, 0.0, 4.0, 4.0, 0, 0.9)];
        assert_eq!(nms(&same, 0.6), vec![same[1]]);
        // other class is not suppressed
        let cross = [det(0.0, 0.0, 4.0, 4.0, 0, 0.8), det(0.0, 0.0, 4.0, 4.0, 1, 0.9)];
        assert_eq!(nms(&cross, 0.6).len(), 2);
        // IoU exactly at the threshold is kept
        let half = [det(0.0, 0.0, 2.0, 2.0, 0, 0.9), det(1.0, 0.0, 3.0, 2.0, 0, 0.8)];
        assert_eq!(nms(&half, 1.0 / 3.0).len(), 2);
    }

    /// Repeatedly pick the best remaining box and strike everything it suppresses.
    fn greedy_oracle(dets: &[Detection], t: f64) -> Vec<Detection> {
        let mut alive: Vec<usize> = (0..dets.len()).collect();
        let mut out = Vec::new();
        while !alive.is_empty() {
            let mut best = alive[0];
            for &i in &alive {
                if dets[i].score > dets[best].score {
                    best = i;
                }
            }
            out.push(dets[best]);
            alive.retain(|&i| i != best && !(dets[i].class_id == dets[best].class_id && iou(&dets[i].bbox, &dets[best].bbox) > t));
        }
        out
    }

    #[test]
    fn chain_matches_greedy_oracle() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // overlapping chain: each box shifted right of its predecessor
            let dets: Vec<Detection> = (0..5)
                .map(|i| {
                    let x = i as f64 * rng.random_range(0.5..3.0);
                    det(x, 0.0, x + 4.0, 4.0, 0, rng.random_range(0.0..1.0))
                })
                .collect();
            for t in [0.1, 0.3, 0.6] {
                assert_eq!(nms(&dets, t), greedy_oracle(&dets, t), "seed {seed} t {t}");
            }
        }
    }

    fn det_strategy() -> impl Strategy<Value = Detection> {
        (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64, 0usize..3, 0.0..1.0f64)
            .prop_map(|(x, y, w, h, c, s)| det(x, y, x + w, y + h, c, s))
    }

    proptest! {
        #[test]
        fn nms_is_idempotent_and_ordered(dets in prop::collection::vec(det_strategy(), 0..25), t in 0.05..1.0f64) {
            let once = nms(&dets, t);
            prop_assert_eq!(nms(&once, t), once.clone());
            prop_assert!(once.windows(2).all(|w| w[0].score >= w[1].score));
            prop_assert!(once.iter().all(|d| dets.contains(d)));
        }
    }

    fn level(logits: Tensor, ltrb: Tensor) -> HeadLevel {
        HeadLevel { logits, ltrb }
    }

    #[test]
    fn postprocess_examples() {
        let cfg = PostprocessConfig::default();
        let quiet = level(Tensor::full(Shape::new(1, 1, 4, 4), -20.0), Tensor::full(Shape::new(1, 4, 4, 4), 1.0));
        assert!(postprocess(&[quiet.clone()], &[8], 0, 32.0, 32.0, &cfg).unwrap().is_empty());

        let mut one = quiet;
        one.logits.set(0, 0, 2, 1, 3.0);
        let dets = postprocess(&[one], &[8], 0, 32.0, 32.0, &cfg).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox, BBox::new(4.0, 12.0, 20.0, 28.0));
        assert!((dets[0].score - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-7);

        let bad = PostprocessConfig { score_thresh: 1.0, ..cfg };
        assert!(postprocess(&[], &[], 0, 1.0, 1.0, &bad).is_err());
    }

    #[test]
    fn postprocess_matches_reference_pipeline() {
        let cfg = PostprocessConfig {
            score_thresh: 0.3,
            nms_thresh: 0.5,
            max_dets: 15,
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sizes = [(8, 8), (4, 4)];
            let levels: Vec<HeadLevel> = sizes
                .iter()
                .map(|&(h, w)| {
                    level(
                        Tensor::random_uniform(Shape::new(1, 2, h, w), -3.0, 1.0, &mut rng),
                        Tensor::random_uniform(Shape::new(1, 4, h, w), 0.0, 2.0, &mut rng),
                    )
                })
                .collect();
            let got = postprocess(&levels, &[8, 16], 0, 64.0, 64.0, &cfg).unwrap();

            let mut cands = Vec::new();
            for (l, lv) in levels.iter().enumerate() {
                let s = [8.0, 16.0][l];
                let (h, w) = sizes[l];
                for r in 0..h {
                    for c in 0..w {
                        for k in 0..2 {
                            let score = 1.0 / (1.0 + (-(lv.logits.at(0, k, r, c) as f64)).exp());
                            if score <= 0.3 {
                                continue;
                            }
                            let (cx, cy) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
                            let d = |i| lv.ltrb.at(0, i, r, c) as f64 * s;
                            let b = BBox::new(
                                (cx - d(0)).max(0.0),
                                (cy - d(1)).max(0.0),
                                (cx + d(2)).min(64.0),
                                (cy + d(3)).min(64.0),
                            );
                            if b.is_valid() {
                                cands.push(Detection { bbox: b, class_id: k, score });
                            }
                        }
                    }
                }
            }
            let mut expect = greedy_oracle(&cands, 0.5);
            expect.truncate(15);
            assert_eq!(got.len(), expect.len(), "seed {seed}");
            for (g, e) in got.iter().zip(&expect) {
                assert_eq!(g.class_id, e.class_id);
                assert_eq!(g.score, e.score);
                assert_eq!(g.bbox, e.bbox);
            }
            assert!(got.iter().all(|d| d.bbox.x1 >= 0.0 && d.bbox.x2 <= 64.0 && (0.0..=1.0).contains(&d.score)));
        }
    }
}
