//! File formats: images in, heatmaps out, detection and ground-truth JSON,
//! and assigner instance files.

use std::collections::BTreeSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::assign::{AssignConfig, AssignmentResult, GtSample, PredSample};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::head::Detection;
use crate::metrics::{DetRecord, EvalSet, GtRecord};
use crate::tensor::{Shape, Tensor};

/// Deserializes JSON, reporting the field path and line/column of the first error.
pub fn parse_json<T: DeserializeOwned>(text: &str, source_name: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        source_name: source_name.to_string(),
        message: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    parse_json(&text, &path.display().to_string())
}

pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

/// `(1, 3, h, w)` tensor with 8-bit RGB samples scaled to `[0, 1]`.
pub fn image_from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor> {
    if rgb.len() != width * height * 3 {
        return Err(Error::InvalidArgument(format!(
            "RGB buffer holds {} bytes, {width}x{height} needs {}",
            rgb.len(),
            width * height * 3
        )));
    }
    Ok(Tensor::from_fn(Shape::new(1, 3, height, width), |_, c, y, x| {
        rgb[(y * width + x) * 3 + c] as f32 / 255.0
    }))
}

/// Decodes a PNG or binary PPM file.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    image_from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
}

/// Min-max normalization of an `(1, 1, h, w)` map to 8-bit gray; a flat or
/// non-finite map becomes all zeros.
pub fn heatmap_bytes(map: &Tensor) -> Vec<u8> {
    let data = map.plane(0, 0);
    let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi as f64 - lo as f64;
    if !(span > 0.0 && span.is_finite()) {
        return vec![0; data.len()];
    }
    data.iter()
        .map(|&v| (((v as f64 - lo as f64) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes a binary PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    if gray.len() != width * height {
        return Err(Error::InvalidArgument(format!("{} bytes do not fill {width}x{height}", gray.len())));
    }
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(gray, width as u32, height as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// One detection in COCO results form; `bbox` is `[x, y, width, height]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoDetection {
    pub image_id: u64,
    pub category_id: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

impl CocoDetection {
    /// Class indices are 0-based, COCO category ids start at 1.
    pub fn from_detection(image_id: u64, d: &Detection) -> Self {
        CocoDetection {
            image_id,
            category_id: d.class_id + 1,
            score: d.score,
            bbox: d.bbox.to_xywh(),
        }
    }
}

/// Output of `detect`: the source image, its size and the detections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub detections: Vec<CocoDetection>,
}

#[derive(Deserialize)]
struct DetectionsField {
    detections: Vec<CocoDetection>,
}

/// A bare COCO results array or an object with a `detections` array.
pub fn parse_detections(text: &str, source_name: &str) -> Result<Vec<CocoDetection>> {
    if text.trim_start().starts_with('[') {
        parse_json(text, source_name)
    } else {
        Ok(parse_json::<DetectionsField>(text, source_name)?.detections)
    }
}

pub fn read_detections(path: &Path) -> Result<Vec<CocoDetection>> {
    let text = std::fs::read_to_string(path)?;
    parse_detections(&text, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    #[serde(default)]
    pub file_name: Option<String>,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub height: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub image_id: u64,
    pub category_id: usize,
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: usize,
    #[serde(default)]
    pub name: Option<String>,
}

/// The subset of a COCO annotation file used for box evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoGroundTruth {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

pub fn read_ground_truth(path: &Path) -> Result<CocoGroundTruth> {
    read_json(path)
}

/// Joins ground truth and detections in category-id space.
pub fn eval_set(gt: &CocoGroundTruth, dets: &[CocoDetection]) -> Result<EvalSet> {
    let ids: BTreeSet<u64> = gt.images.iter().map(|i| i.id).collect();
    let orphans: BTreeSet<u64> = dets.iter().map(|d| d.image_id).filter(|id| !ids.contains(id)).collect();
    if !orphans.is_empty() {
        return Err(Error::Validation(format!(
            "detections reference image ids missing from the ground truth: {orphans:?}"
        )));
    }
    Ok(EvalSet {
        image_ids: gt.images.iter().map(|i| i.id).collect(),
        classes: gt.categories.iter().map(|c| c.id).collect(),
        gts: gt
            .annotations
            .iter()
            .map(|a| GtRecord {
                image_id: a.image_id,
                class_id: a.category_id,
                bbox: BBox::from_xywh(a.bbox),
            })
            .collect(),
        dets: dets
            .iter()
            .map(|d| DetRecord {
                image_id: d.image_id,
                class_id: d.category_id,
                bbox: BBox::from_xywh(d.bbox),
                score: d.score,
            })
            .collect(),
    })
}

/// Assigner overrides carried inside an instance file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignOverrides {
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub num_levels: Option<usize>,
}

impl AssignOverrides {
    pub fn apply(&self, mut base: AssignConfig) -> AssignConfig {
        base.lambda = self.lambda.unwrap_or(base.lambda);
        base.top_k = self.top_k.unwrap_or(base.top_k);
        base.num_levels = self.num_levels.unwrap_or(base.num_levels);
        base
    }
}

/// Predictions and ground truths for one `assign` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    #[serde(default)]
    pub config: AssignOverrides,
    pub predictions: Vec<PredSample>,
    pub ground_truths: Vec<GtSample>,
}

pub fn read_instances(path: &Path) -> Result<InstanceFile> {
    read_json(path)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GtReport {
    pub index: usize,
    pub class_id: usize,
    pub candidates: Vec<usize>,
    pub threshold: Option<f64>,
    pub retained: Vec<usize>,
    pub fallback: bool,
    pub assigned: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssignReport {
    pub config: AssignConfig,
    pub num_predictions: usize,
    pub num_ground_truths: usize,
    pub num_foreground: usize,
    pub num_background: usize,
    pub all_background: bool,
    pub ground_truths: Vec<GtReport>,
    /// GT index per prediction, `null` for background.
    pub assignment: Vec<Option<usize>>,
    pub costs: Vec<Vec<f64>>,
}

impl AssignReport {
    pub fn new(config: AssignConfig, gts: &[GtSample], result: &AssignmentResult) -> Self {
        let fg = result.num_foreground();
        AssignReport {
            config,
            num_predictions: result.assignment.len(),
            num_ground_truths: gts.len(),
            num_foreground: fg,
            num_background: result.assignment.len() - fg,
            all_background: result.all_background,
            ground_truths: result
                .per_gt
                .iter()
                .zip(gts)
                .enumerate()
                .map(|(index, (g, gt))| GtReport {
                    index,
                    class_id: gt.class_id,
                    candidates: g.candidates.clone(),
                    threshold: g.threshold,
                    retained: g.retained.clone(),
                    fallback: g.fallback,
                    assigned: g.assigned.clone(),
                })
                .collect(),
            assignment: result.assignment.clone(),
            costs: result.costs.clone(),
        }
    }
}
