//! Open-world semantic heatmaps from captioned crops.
//!
//! Without an object list, scene understanding arrives as image crops with
//! caption labels. Each crop carries an affinity toward the target and a
//! caption-relevance weight; a pixel's heat is the mean weighted affinity
//! over the crops covering it. Heatmaps are scored against annotated
//! search regions by IoU and ranked across views by 90th-percentile heat.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpenWorldError {
    #[error("crop fixture is malformed: {0}")]
    BadFixture(String),
    #[error("mask out of bounds: {0}")]
    MaskOutOfBounds(String),
    #[error("heatmap dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pixel region of a crop: an axis-aligned rectangle (x1/y1 exclusive) or
/// an explicit run-length encoded pixel set over row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CropMask {
    Rect { rect: [u32; 4] },
    Rle { mask_rle: String },
}

/// One captioned crop: its mask, the caption label, the caption-relevance
/// weight, and the label-to-target affinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    #[serde(flatten)]
    pub mask: CropMask,
    pub label: String,
    pub relevance: f64,
    pub affinity: f64,
}

/// Per-pixel nonnegative heat; pixels covered by no crop carry zero and
/// are excluded from percentile and threshold statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub covered: Vec<bool>,
}

impl Heatmap {
    pub fn covered_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.covered)
            .filter(|(_, &c)| c)
            .map(|(v, _)| *v)
    }
}

/// Parse `start:len` run pairs over row-major pixel indices.
pub fn parse_rle(text: &str, len: usize) -> Result<Vec<usize>, OpenWorldError> {
    let mut out = Vec::new();
    for part in text.split(',').filter(|p| !p.trim().is_empty()) {
        let (start, run) = part
            .trim()
            .split_once(':')
            .ok_or_else(|| OpenWorldError::BadFixture(format!("bad RLE run '{part}'")))?;
        let start: usize = start
            .parse()
            .map_err(|_| OpenWorldError::BadFixture(format!("bad RLE start '{start}'")))?;
        let run: usize = run
            .parse()
            .map_err(|_| OpenWorldError::BadFixture(format!("bad RLE length '{run}'")))?;
        if start + run > len {
            return Err(OpenWorldError::MaskOutOfBounds(format!(
                "run {start}:{run} exceeds {len} pixels"
            )));
        }
        out.extend(start..start + run);
    }
    Ok(out)
}

pub fn encode_rle(pixels: &[usize]) -> String {
    let mut sorted: Vec<usize> = pixels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut runs = Vec::new();
    let mut i = 0usize;
    while i < sorted.len() {
        let start = sorted[i];
        let mut end = i;
        while end + 1 < sorted.len() && sorted[end + 1] == sorted[end] + 1 {
            end += 1;
        }
        runs.push(format!("{start}:{}", end - i + 1));
        i = end + 1;
    }
    runs.join(",")
}

fn mask_pixels(mask: &CropMask, width: usize, height: usize) -> Result<Vec<usize>, OpenWorldError> {
    match mask {
        CropMask::Rect { rect } => {
            let [x0, y0, x1, y1] = rect.map(|v| v as usize);
            if x0 >= x1 || y0 >= y1 || x1 > width || y1 > height {
                return Err(OpenWorldError::MaskOutOfBounds(format!("rect {rect:?}")));
            }
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    out.push(y * width + x);
                }
            }
            Ok(out)
        }
        CropMask::Rle { mask_rle } => {
            let out = parse_rle(mask_rle, width * height)?;
            if out.is_empty() {
                return Err(OpenWorldError::BadFixture("empty mask".into()));
            }
            Ok(out)
        }
    }
}

/// Per-pixel mean of `affinity * relevance` over the crops covering the
/// pixel; zero where no crop reaches. Linear in the weighted scores and
/// independent of crop order.
pub fn aggregate(
    crops: &[CropRecord],
    width: usize,
    height: usize,
) -> Result<Heatmap, OpenWorldError> {
    if crops.is_empty() {
        return Err(OpenWorldError::BadFixture("no crops".into()));
    }
    let mut sum = vec![0.0f64; width * height];
    let mut count = vec![0u32; width * height];
    for crop in crops {
        let w = crop.affinity * crop.relevance;
        for p in mask_pixels(&crop.mask, width, height)? {
            sum[p] += w;
            count[p] += 1;
        }
    }
    let mut values = vec![0.0f64; width * height];
    let mut covered = vec![false; width * height];
    for i in 0..values.len() {
        if count[i] > 0 {
            values[i] = sum[i] / count[i] as f64;
            covered[i] = true;
        }
    }
    Ok(Heatmap {
        width,
        height,
        values,
        covered,
    })
}

/// How the heatmap is binarized before IoU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// Mean plus one standard deviation over covered pixels (scale-free).
    MeanPlusStd,
    Absolute(f64),
}

/// IoU between the thresholded heatmap and an annotated pixel set.
/// An empty union scores zero.
pub fn iou_at_threshold(heat: &Heatmap, truth: &HashSet<usize>, rule: ThresholdRule) -> f64 {
    let threshold = match rule {
        ThresholdRule::Absolute(t) => t,
        ThresholdRule::MeanPlusStd => {
            let vals: Vec<f64> = heat.covered_values().collect();
            if vals.is_empty() {
                return 0.0;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            mean + var.sqrt()
        }
    };
    let mut intersection = 0usize;
    let mut union = 0usize;
    for i in 0..heat.values.len() {
        let pred = heat.covered[i] && heat.values[i] >= threshold;
        let is_truth = truth.contains(&i);
        if pred || is_truth {
            union += 1;
        }
        if pred && is_truth {
            intersection += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        intersection as f64 / union as f64
    }
}

/// 90th-percentile heat over covered pixels, nearest-rank method.
pub fn percentile_90(heat: &Heatmap) -> f64 {
    let mut vals: Vec<f64> = heat.covered_values().collect();
    if vals.is_empty() {
        return 0.0;
    }
    vals.sort_by(f64::total_cmp);
    let rank = ((0.9 * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
    vals[rank - 1]
}

/// View with the highest 90th-percentile heat; ties go to the lowest
/// index. Robust to a handful of outlier pixels by construction.
pub fn select_view(heatmaps: &[Heatmap]) -> usize {
    assert!(!heatmaps.is_empty(), "need at least one view");
    let mut best = 0usize;
    let mut best_p = f64::NEG_INFINITY;
    for (i, h) in heatmaps.iter().enumerate() {
        let p = percentile_90(h);
        if p > best_p {
            best_p = p;
            best = i;
        }
    }
    best
}

/// One evaluation image: crops plus the annotated ground-truth region,
/// optionally tagged with the method that produced the crops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropFixture {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub width: usize,
    pub height: usize,
    pub crops: Vec<CropRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_rle: Option<String>,
}

impl CropFixture {
    pub fn read(r: &mut impl BufRead) -> Result<Self, OpenWorldError> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        serde_json::from_str(&text).map_err(|e| OpenWorldError::BadFixture(e.to_string()))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<(), OpenWorldError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| OpenWorldError::BadFixture(e.to_string()))?;
        writeln!(w, "{text}")?;
        Ok(())
    }

    pub fn truth_pixels(&self) -> Result<HashSet<usize>, OpenWorldError> {
        match &self.truth_rle {
            Some(rle) => Ok(parse_rle(rle, self.width * self.height)?
                .into_iter()
                .collect()),
            None => Err(OpenWorldError::BadFixture(
                "missing ground-truth mask".into(),
            )),
        }
    }
}

/// Export as an ASCII portable graymap (P2), scaled to a max level of 255,
/// for quick visual inspection.
pub fn write_pgm(w: &mut impl Write, heat: &Heatmap) -> std::io::Result<()> {
    writeln!(w, "P2")?;
    writeln!(w, "{} {}", heat.width, heat.height)?;
    writeln!(w, "255")?;
    let max = heat.values.iter().cloned().fold(0.0f64, f64::max);
    for y in 0..heat.height {
        let row: Vec<String> = (0..heat.width)
            .map(|x| {
                let v = heat.values[y * heat.width + x];
                let level = if max > 0.0 {
                    (v / max * 255.0).round() as u32
                } else {
                    0
                };
                level.to_string()
            })
            .collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect_crop(rect: [u32; 4], affinity: f64, relevance: f64) -> CropRecord {
        CropRecord {
            mask: CropMask::Rect { rect },
            label: "thing".into(),
            relevance,
            affinity,
        }
    }

    #[test]
    fn single_full_image_crop_is_constant() {
        let h = aggregate(&[rect_crop([0, 0, 4, 3], 0.5, 0.8)], 4, 3).unwrap();
        assert!(h.values.iter().all(|&v| (v - 0.4).abs() < 1e-12));
        assert!(h.covered.iter().all(|&c| c));
    }

    #[test]
    fn overlap_averages_weighted_scores() {
        // Two rectangles overlapping in the middle column.
        let crops = vec![
            rect_crop([0, 0, 2, 1], 0.8, 1.0),
            rect_crop([1, 0, 3, 1], 0.2, 1.0),
        ];
        let h = aggregate(&crops, 3, 1).unwrap();
        assert!((h.values[0] - 0.8).abs() < 1e-12);
        assert!((h.values[1] - 0.5).abs() < 1e-12);
        assert!((h.values[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn uncovered_pixels_are_zero_and_excluded() {
        let h = aggregate(&[rect_crop([0, 0, 1, 1], 0.9, 1.0)], 2, 1).unwrap();
        assert_eq!(h.values[1], 0.0);
        assert!(!h.covered[1]);
        assert_eq!(h.covered_values().count(), 1);
    }

    #[test]
    fn aggregation_matches_per_pixel_brute_force() {
        let crops = vec![
            rect_crop([0, 0, 5, 4], 0.3, 0.5),
            rect_crop([2, 1, 6, 5], 0.9, 1.0),
            CropRecord {
                mask: CropMask::Rle {
                    mask_rle: "0:3,10:4,25:5".into(),
                },
                label: "x".into(),
                relevance: 2.0,
                affinity: 0.25,
            },
        ];
        let (w, hgt) = (6usize, 5usize);
        let h = aggregate(&crops, w, hgt).unwrap();
        for p in 0..w * hgt {
            let mut sum = 0.0;
            let mut count = 0u32;
            for crop in &crops {
                let pixels = mask_pixels(&crop.mask, w, hgt).unwrap();
                if pixels.contains(&p) {
                    sum += crop.affinity * crop.relevance;
                    count += 1;
                }
            }
            let expect = if count > 0 { sum / count as f64 } else { 0.0 };
            assert_eq!(h.values[p], expect, "pixel {p}");
        }
    }

    #[test]
    fn crop_order_does_not_matter() {
        let mut crops = vec![
            rect_crop([0, 0, 3, 3], 0.4, 1.0),
            rect_crop([1, 1, 4, 4], 0.6, 0.5),
            rect_crop([2, 0, 4, 2], 0.1, 2.0),
        ];
        let a = aggregate(&crops, 4, 4).unwrap();
        crops.reverse();
        let b = aggregate(&crops, 4, 4).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_identical_masks_is_one() {
        let h = aggregate(&[rect_crop([1, 1, 3, 3], 1.0, 1.0)], 4, 4).unwrap();
        let truth: HashSet<usize> = mask_pixels(&CropMask::Rect { rect: [1, 1, 3, 3] }, 4, 4)
            .unwrap()
            .into_iter()
            .collect();
        assert_eq!(
            iou_at_threshold(&h, &truth, ThresholdRule::Absolute(0.5)),
            1.0
        );
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let h = aggregate(&[rect_crop([0, 0, 1, 1], 1.0, 1.0)], 4, 1).unwrap();
        let truth: HashSet<usize> = [3usize].into();
        assert_eq!(
            iou_at_threshold(&h, &truth, ThresholdRule::Absolute(0.5)),
            0.0
        );
    }

    #[test]
    fn iou_half_overlap_equal_area_is_one_third() {
        // Prediction [0,4), truth [2,6): overlap 2, union 6.
        let h = aggregate(&[rect_crop([0, 0, 4, 1], 1.0, 1.0)], 8, 1).unwrap();
        let truth: HashSet<usize> = (2..6).collect();
        let iou = iou_at_threshold(&h, &truth, ThresholdRule::Absolute(0.5));
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn select_view_prefers_higher_constant() {
        let a = aggregate(&[rect_crop([0, 0, 4, 4], 0.2, 1.0)], 4, 4).unwrap();
        let b = aggregate(&[rect_crop([0, 0, 4, 4], 0.5, 1.0)], 4, 4).unwrap();
        assert_eq!(select_view(&[a.clone(), b.clone()]), 1);
        assert_eq!(select_view(&[b, a]), 0);
        let solo = aggregate(&[rect_crop([0, 0, 4, 4], 0.1, 1.0)], 4, 4).unwrap();
        assert_eq!(select_view(&[solo]), 0);
    }

    #[test]
    fn percentile_is_outlier_robust() {
        // View A: mostly low with a few extreme outliers. View B: broadly
        // high. B's 90th percentile wins.
        let a_crops = vec![
            rect_crop([0, 0, 10, 10], 0.1, 1.0),
            rect_crop([0, 0, 1, 1], 99.0, 1.0),
        ];
        let b_crops = vec![rect_crop([0, 0, 10, 10], 0.6, 1.0)];
        let a = aggregate(&a_crops, 10, 10).unwrap();
        let b = aggregate(&b_crops, 10, 10).unwrap();
        // Sorting oracle for the nearest-rank percentile.
        let mut vals: Vec<f64> = a.covered_values().collect();
        vals.sort_by(f64::total_cmp);
        let rank = (0.9 * vals.len() as f64).ceil() as usize;
        assert_eq!(percentile_90(&a), vals[rank - 1]);
        assert!(percentile_90(&b) > percentile_90(&a));
        assert_eq!(select_view(&[a, b]), 1);
    }

    #[test]
    fn relevance_scaling_preserves_decisions() {
        let crops_a = vec![
            rect_crop([0, 0, 6, 6], 0.3, 1.0),
            rect_crop([2, 2, 6, 6], 0.9, 0.7),
        ];
        let crops_b = vec![rect_crop([0, 0, 6, 6], 0.5, 0.9)];
        let truth: HashSet<usize> = mask_pixels(&CropMask::Rect { rect: [2, 2, 6, 6] }, 6, 6)
            .unwrap()
            .into_iter()
            .collect();
        for c in [0.1f64, 10.0] {
            let scale = |crops: &[CropRecord]| -> Vec<CropRecord> {
                crops
                    .iter()
                    .cloned()
                    .map(|mut cr| {
                        cr.relevance *= c;
                        cr
                    })
                    .collect()
            };
            let a0 = aggregate(&crops_a, 6, 6).unwrap();
            let a1 = aggregate(&scale(&crops_a), 6, 6).unwrap();
            // Heat scales linearly.
            for (x, y) in a0.values.iter().zip(&a1.values) {
                assert!((x * c - y).abs() < 1e-9);
            }
            // Scale-free threshold rule gives the same IoU.
            let i0 = iou_at_threshold(&a0, &truth, ThresholdRule::MeanPlusStd);
            let i1 = iou_at_threshold(&a1, &truth, ThresholdRule::MeanPlusStd);
            assert!((i0 - i1).abs() < 1e-12);
            // View selection is unchanged.
            let b0 = aggregate(&crops_b, 6, 6).unwrap();
            let b1 = aggregate(&scale(&crops_b), 6, 6).unwrap();
            assert_eq!(select_view(&[a0, b0]), select_view(&[a1, b1]));
        }
    }

    #[test]
    fn rle_round_trip() {
        let pixels = vec![0usize, 1, 2, 10, 11, 12, 13, 25];
        let rle = encode_rle(&pixels);
        assert_eq!(rle, "0:3,10:4,25:1");
        assert_eq!(parse_rle(&rle, 30).unwrap(), pixels);
    }

    #[test]
    fn fixture_round_trip() {
        let fixture = CropFixture {
            method: Some("demo".into()),
            width: 4,
            height: 3,
            crops: vec![rect_crop([0, 0, 2, 2], 0.7, 1.2)],
            truth_rle: Some("0:2,4:2".into()),
        };
        let mut buf = Vec::new();
        fixture.write(&mut buf).unwrap();
        let parsed = CropFixture::read(&mut buf.as_slice()).unwrap();
        assert_eq!(parsed, fixture);
        assert_eq!(parsed.truth_pixels().unwrap().len(), 4);
    }

    #[test]
    fn pgm_export_shape() {
        let h = aggregate(&[rect_crop([0, 0, 3, 2], 0.5, 1.0)], 3, 2).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &h).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "P2");
        assert_eq!(lines[1], "3 2");
        assert_eq!(lines[2], "255");
        assert_eq!(lines.len(), 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn iou_symmetric_and_bounded(
            a0 in 0u32..6, b0 in 0u32..6, wa in 1u32..5, wb in 1u32..5,
        ) {
            let (w, h) = (10usize, 1usize);
            let pa = rect_crop([a0, 0, (a0 + wa).min(10), 1], 1.0, 1.0);
            let pb = rect_crop([b0, 0, (b0 + wb).min(10), 1], 1.0, 1.0);
            let ha = aggregate(std::slice::from_ref(&pa), w, h).unwrap();
            let hb = aggregate(std::slice::from_ref(&pb), w, h).unwrap();
            let sa: HashSet<usize> = mask_pixels(&pa.mask, w, h).unwrap().into_iter().collect();
            let sb: HashSet<usize> = mask_pixels(&pb.mask, w, h).unwrap().into_iter().collect();
            let iab = iou_at_threshold(&ha, &sb, ThresholdRule::Absolute(0.5));
            let iba = iou_at_threshold(&hb, &sa, ThresholdRule::Absolute(0.5));
            prop_assert!((iab - iba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&iab));
        }
    }
}
