use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::schema::{AnnotationKind, MultiGrainedSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub patch_size: usize,
    pub max_aspect_ratio: f64,
    /// Images whose shorter edge is below this many pixels are dropped.
    pub min_short_edge: Option<usize>,
    pub max_region_overlap: f64,
}

impl FilterConfig {
    pub fn new(patch_size: usize) -> Self {
        Self {
            patch_size,
            max_aspect_ratio: 3.0,
            min_short_edge: None,
            max_region_overlap: 0.75,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    Invalid,
    TooSmall,
    Overlap,
    AspectRatio,
    ShortEdge,
    /// Nothing left to learn from after the other rules.
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub source_id: String,
    pub rule: FilterRule,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RejectionReport {
    pub rejections: Vec<Rejection>,
}

impl RejectionReport {
    pub fn counts(&self) -> BTreeMap<FilterRule, usize> {
        let mut out = BTreeMap::new();
        for r in &self.rejections {
            *out.entry(r.rule).or_insert(0) += 1;
        }
        out
    }

    pub fn count(&self, rule: FilterRule) -> usize {
        self.rejections.iter().filter(|r| r.rule == rule).count()
    }

    pub fn to_jsonl(&self) -> String {
        self.rejections
            .iter()
            .map(|r| serde_json::to_string(r).expect("rejection serializes") + "\n")
            .collect()
    }
}

/// Word-set Jaccard overlap of two descriptions.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let sa: HashSet<&str> = a.split_whitespace().collect();
    let sb: HashSet<&str> = b.split_whitespace().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Drops bad annotations and images; one rejection is reported per dropped item.
pub fn validate_and_filter(
    samples: Vec<MultiGrainedSample>,
    cfg: &FilterConfig,
) -> (Vec<MultiGrainedSample>, RejectionReport) {
    let mut report = RejectionReport::default();
    let mut kept = Vec::with_capacity(samples.len());
    for mut s in samples {
        let (h, w, _) = s.media.dims();
        let reject = |rule| Rejection {
            source_id: s.id.clone(),
            rule,
        };
        let (short, long) = (h.min(w) as f64, h.max(w) as f64);
        if long / short > cfg.max_aspect_ratio {
            report.rejections.push(reject(FilterRule::AspectRatio));
            continue;
        }
        if cfg.min_short_edge.is_some_and(|m| (short as usize) < m) {
            report.rejections.push(reject(FilterRule::ShortEdge));
            continue;
        }
        let min_area = (cfg.patch_size * cfg.patch_size) as f64;
        let mut out = Vec::with_capacity(s.annotations.len());
        for a in std::mem::take(&mut s.annotations) {
            let b = a.bbox;
            let outside = b.cx - b.w / 2.0 < -1e-9
                || b.cy - b.h / 2.0 < -1e-9
                || b.cx + b.w / 2.0 > 1.0 + 1e-9
                || b.cy + b.h / 2.0 > 1.0 + 1e-9;
            if b.validate().is_err() || outside {
                report.rejections.push(reject(FilterRule::Invalid));
                continue;
            }
            if b.w * w as f64 * b.h * h as f64 + 1e-9 < min_area {
                report.rejections.push(reject(FilterRule::TooSmall));
                continue;
            }
            let overlapping = a.kind == AnnotationKind::Region
                && out.iter().any(|k: &super::schema::Annotation| {
                    k.kind == AnnotationKind::Region && jaccard(&k.text, &a.text) > cfg.max_region_overlap
                });
            if overlapping {
                report.rejections.push(reject(FilterRule::Overlap));
                continue;
            }
            out.push(a);
        }
        s.annotations = out;
        if s.caption.is_none() && s.annotations.is_empty() {
            report.rejections.push(reject(FilterRule::Empty));
            continue;
        }
        kept.push(s);
    }
    (kept, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::schema::{Annotation, Media};
    use crate::vision::{BoundingBox, ImageTensor};

    fn sample(annotations: Vec<Annotation>) -> MultiGrainedSample {
        MultiGrainedSample {
            id: "s0".into(),
            media: Media::Image(ImageTensor::zeros(32, 32, 3)),
            caption: Some("a red circle".into()),
            annotations,
            frame_boxes: vec![],
        }
    }

    fn ann(cx: f64, cy: f64, w: f64, h: f64, text: &str, kind: AnnotationKind) -> Annotation {
        Annotation {
            bbox: BoundingBox { cx, cy, w, h },
            text: text.into(),
            kind,
        }
    }

    #[test]
    fn negative_box_is_invalid() {
        let (kept, report) = validate_and_filter(
            vec![sample(vec![ann(-0.1, 0.5, 0.2, 0.2, "red circle", AnnotationKind::Object)])],
            &FilterConfig::new(8),
        );
        assert!(kept[0].annotations.is_empty());
        assert_eq!(report.count(FilterRule::Invalid), 1);
    }

    #[test]
    fn box_outside_image_is_invalid() {
        let (_, report) = validate_and_filter(
            vec![sample(vec![ann(0.95, 0.5, 0.2, 0.2, "red circle", AnnotationKind::Object)])],
            &FilterConfig::new(8),
        );
        assert_eq!(report.count(FilterRule::Invalid), 1);
    }

    #[test]
    fn box_of_half_a_patch_is_too_small() {
        // patch area / image area = 64 / 1024; half of it
        let side = (0.5f64 * 64.0 / 1024.0).sqrt();
        let (kept, report) = validate_and_filter(
            vec![sample(vec![ann(0.5, 0.5, side, side, "red circle", AnnotationKind::Object)])],
            &FilterConfig::new(8),
        );
        assert!(kept[0].annotations.is_empty());
        assert_eq!(report.count(FilterRule::TooSmall), 1);
    }

    #[test]
    fn box_of_exactly_one_patch_is_kept() {
        let (kept, _) = validate_and_filter(
            vec![sample(vec![ann(0.125, 0.125, 0.25, 0.25, "red circle", AnnotationKind::Object)])],
            &FilterConfig::new(8),
        );
        assert_eq!(kept[0].annotations.len(), 1);
    }

    #[test]
    fn overlapping_region_texts_keep_the_first() {
        assert!((jaccard("red circle top left", "red circle at top left") - 0.8).abs() < 1e-12);
        let (kept, report) = validate_and_filter(
            vec![sample(vec![
                ann(0.5, 0.5, 0.5, 0.5, "red circle top left", AnnotationKind::Region),
                ann(0.5, 0.5, 0.5, 0.5, "red circle at top left", AnnotationKind::Region),
            ])],
            &FilterConfig::new(8),
        );
        assert_eq!(kept[0].annotations.len(), 1);
        assert_eq!(kept[0].annotations[0].text, "red circle top left");
        assert_eq!(report.count(FilterRule::Overlap), 1);
    }

    #[test]
    fn objects_are_not_subject_to_overlap_rule() {
        let (kept, _) = validate_and_filter(
            vec![sample(vec![
                ann(0.5, 0.5, 0.5, 0.5, "red circle", AnnotationKind::Object),
                ann(0.5, 0.5, 0.5, 0.5, "red circle", AnnotationKind::Object),
            ])],
            &FilterConfig::new(8),
        );
        assert_eq!(kept[0].annotations.len(), 2);
    }

    #[test]
    fn wide_images_and_short_edges_are_dropped() {
        let mut wide = sample(vec![]);
        wide.media = Media::Image(ImageTensor::zeros(8, 32, 3));
        let (kept, report) = validate_and_filter(vec![wide], &FilterConfig::new(8));
        assert!(kept.is_empty());
        assert_eq!(report.count(FilterRule::AspectRatio), 1);

        let mut cfg = FilterConfig::new(8);
        cfg.min_short_edge = Some(224);
        let (kept, report) = validate_and_filter(vec![sample(vec![])], &cfg);
        assert!(kept.is_empty());
        assert_eq!(report.count(FilterRule::ShortEdge), 1);
    }

    #[test]
    fn sample_left_empty_is_dropped() {
        let mut s = sample(vec![ann(-0.1, 0.5, 0.2, 0.2, "x", AnnotationKind::Object)]);
        s.caption = None;
        let (kept, report) = validate_and_filter(vec![s], &FilterConfig::new(8));
        assert!(kept.is_empty());
        assert_eq!(report.count(FilterRule::Empty), 1);
        assert!(report.to_jsonl().contains("\"rule\":\"empty\""));
    }
}
