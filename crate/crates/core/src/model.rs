//! The composed detector: resize, backbone, pyramid, deformable branches,
//! heads and postprocessing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, TAP_CHANNELS};
use crate::config::ModelConfig;
use crate::deform::{DisentangleModule, OffsetField};
use crate::error::{ensure_eq, Error, Result};
use crate::head::{head_forward, postprocess, Detection, Head, HeadLevel, STRIDES};
use crate::layers::{join, Parameters};
use crate::neck::Fpn;
use crate::tensor::{resize_bicubic, Tensor};
use crate::weights::WeightStore;

/// Seeded uniform initialization. Offset networks stay zero unless `phi_range` is set,
/// so a fresh model samples on the regular grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitOptions {
    pub seed: u64,
    pub range: f32,
    pub phi_range: Option<f32>,
}

impl InitOptions {
    pub fn seeded(seed: u64) -> Self {
        InitOptions {
            seed,
            range: 0.1,
            phi_range: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub neck: Fpn,
    pub deform: DisentangleModule,
    pub head: Head,
}

fn is_phi(name: &str) -> bool {
    name.starts_with("deform.") && name.contains(".phi.")
}

impl Model {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.neck_channels;
        Ok(Model {
            config: config.clone(),
            backbone: Backbone::zeros(),
            neck: Fpn::zeros(c, &TAP_CHANNELS),
            deform: DisentangleModule::zeros(c, TAP_CHANNELS.len()),
            head: Head::zeros(c, config.num_classes),
        })
    }

    pub fn random(config: &ModelConfig, init: &InitOptions) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let r = init.range;
        model.visit_mut("", &mut |name, _, data| {
            let range = if is_phi(name) { init.phi_range } else { Some(r) };
            if let Some(range) = range.filter(|&v| v > 0.0) {
                data.iter_mut().for_each(|v| *v = rng.random_range(-range..range));
            }
        });
        Ok(model)
    }

    /// Fills every parameter from `store`; extra tensors in the store are ignored.
    pub fn from_store(config: &ModelConfig, store: &WeightStore) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut failure = None;
        model.visit_mut("", &mut |name, shape, data| {
            if failure.is_some() {
                return;
            }
            match store.get(name) {
                None => failure = Some(Error::MissingTensor(name.to_string())),
                Some(t) if t.shape != shape => {
                    failure = Some(Error::Validation(format!(
                        "tensor `{name}` has shape {:?}, the configured model needs {shape:?}",
                        t.shape
                    )))
                }
                Some(t) => data.copy_from_slice(&t.data),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    /// Config embedded in the store when present, the default config otherwise.
    pub fn load_store(store: &WeightStore, config: Option<&ModelConfig>) -> Result<Self> {
        let config = match (config, &store.config) {
            (Some(c), _) => c.clone(),
            (None, Some(v)) => ModelConfig::from_value(v)?,
            (None, None) => ModelConfig::default(),
        };
        Self::from_store(&config, store)
    }

    pub fn to_store(&self) -> WeightStore {
        let mut store = WeightStore::new();
        self.visit("", &mut |name, shape, data| {
            store
                .insert(name, shape, data.to_vec())
                .expect("parameter names are unique and shapes consistent");
        });
        store.config = Some(self.config.to_value());
        store
    }

    /// Size of the serialized weight file in bytes.
    pub fn serialized_size(&self) -> usize {
        self.to_store().to_bytes().map(|b| b.len()).unwrap_or(0)
    }

    /// `(1, 3, H, W)` image in `[0, 1]` to the square network input.
    pub fn preprocess(&self, image: &Tensor) -> Result<Tensor> {
        ensure_eq("preprocess", "c", 3, image.shape().c)?;
        let s = self.config.input_size;
        resize_bicubic(image, s, s)
    }

    /// Head outputs and the per-level (cls, reg) offset fields for a network input.
    pub fn forward_full(&self, input: &Tensor) -> Result<(Vec<HeadLevel>, Vec<(OffsetField, OffsetField)>)> {
        let taps = self.backbone.forward(input)?;
        let pyramid = self.neck.forward(&taps)?;
        ensure_eq("forward", "levels", self.deform.levels.len(), pyramid.levels.len())?;
        let mut feats = Vec::with_capacity(pyramid.levels.len());
        let mut offsets = Vec::with_capacity(pyramid.levels.len());
        for (lvl, f) in self.deform.levels.iter().zip(&pyramid.levels) {
            let (d, oc, or) = lvl.forward_with_offsets(f)?;
            feats.push(d);
            offsets.push((oc, or));
        }
        Ok((head_forward(&feats, &self.head)?, offsets))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Vec<HeadLevel>> {
        Ok(self.forward_full(input)?.0)
    }

    /// Detections for a `(1, 3, H, W)` image in `[0, 1]`, in that image's pixel frame.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let shape = image.shape();
        ensure_eq("detect", "n", 1, shape.n)?;
        let input = self.preprocess(image)?;
        let s = self.config.input_size as f64;
        let levels = self.forward(&input)?;
        let dets = postprocess(&levels, &STRIDES, 0, s, s, &self.config.postprocess())?;
        let (w, h) = (shape.w as f64, shape.h as f64);
        Ok(dets
            .into_iter()
            .map(|d| Detection {
                bbox: d.bbox.scaled(w / s, h / s).clamped(w, h),
                ..d
            })
            .filter(|d| d.bbox.is_valid())
            .collect())
    }

    /// Mean offset magnitude per location and level, averaged over both branches.
    pub fn offset_magnitudes(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let input = self.preprocess(image)?;
        let (_, offsets) = self.forward_full(&input)?;
        offsets
            .iter()
            .map(|(c, r)| Ok(c.mean_magnitude().add(&r.mean_magnitude())?.scale(0.5)))
            .collect()
    }
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.neck.visit(&join(prefix, "neck"), f);
        self.deform.visit(&join(prefix, "deform"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.neck.visit_mut(&join(prefix, "neck"), f);
        self.deform.visit_mut(&join(prefix, "deform"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn small_config() -> ModelConfig {
        ModelConfig::default().with_neck(8).with_input_size(64)
    }

    #[test]
    fn parameter_names_are_unique_and_cover_each_stage() {
        let m = Model::zeros(&small_config()).unwrap();
        let mut names = Vec::new();
        m.visit("", &mut |n, _, _| names.push(n.to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        for expected in ["backbone.stem.weight", "neck.l0.lateral.weight", "deform.l2.phi.weight", "deform.fusion.cls", "head.reg.proj.bias"] {
            assert!(names.iter().any(|n| n == expected), "{expected}");
        }
    }

    #[test]
    fn random_init_is_seeded_and_keeps_offsets_zero() {
        let cfg = small_config();
        let a = Model::random(&cfg, &InitOptions::seeded(5)).unwrap();
        assert_eq!(a, Model::random(&cfg, &InitOptions::seeded(5)).unwrap());
        assert_ne!(a, Model::random(&cfg, &InitOptions::seeded(6)).unwrap());
        a.visit("", &mut |name, _, data| {
            if is_phi(name) {
                assert!(data.iter().all(|&v| v == 0.0), "{name}");
            } else {
                assert!(data.iter().all(|&v| v.abs() < 0.1), "{name}");
            }
        });
        let with_phi = Model::random(
            &cfg,
            &InitOptions {
                phi_range: Some(0.01),
                ..InitOptions::seeded(5)
            },
        )
        .unwrap();
        assert!(with_phi.deform.levels[0].phi.weight.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn store_roundtrip_and_missing_tensor() {
        let cfg = small_config();
        let m = Model::random(&cfg, &InitOptions::seeded(1)).unwrap();
        let store = WeightStore::from_bytes(&m.to_store().to_bytes().unwrap()).unwrap();
        assert_eq!(Model::load_store(&store, None).unwrap(), m);

        let mut partial = WeightStore::new();
        for name in store.names().iter().filter(|n| *n != "deform.l2.phi.weight") {
            let t = store.get(name).unwrap();
            partial.insert(name, &t.shape, t.data.clone()).unwrap();
        }
        match Model::from_store(&cfg, &partial) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, "deform.l2.phi.weight"),
            other => panic!("expected missing tensor, got {other:?}"),
        }
        let wider = cfg.clone().with_neck(16);
        assert!(matches!(Model::from_store(&wider, &store), Err(Error::Validation(_))));
    }

    #[test]
    fn detect_boxes_stay_in_frame() {
        let cfg = ModelConfig {
            score_thresh: 0.4,
            ..small_config()
        };
        let m = Model::random(&cfg, &InitOptions::seeded(2)).unwrap();
        let image = Tensor::from_fn(Shape::new(1, 3, 48, 80), |_, c, y, x| ((x * 7 + y * 3 + c * 11) % 17) as f32 / 16.0);
        let dets = m.detect(&image).unwrap();
        assert_eq!(dets, m.detect(&image).unwrap());
        for d in &dets {
            assert!(d.bbox.is_valid() && d.bbox.x2 <= 80.0 && d.bbox.y2 <= 48.0);
            assert!((0.0..=1.0).contains(&d.score));
        }
        let heat = m.offset_magnitudes(&image).unwrap();
        assert_eq!(heat.len(), 3);
        assert!(heat.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }
}
