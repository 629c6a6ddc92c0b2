//! Shapes-world: colored circles, squares and triangles on a black canvas,
//! placed on patch-aligned cells so every box is exact.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::filter::jaccard;
use super::schema::{Annotation, AnnotationKind, Dataset, Media, MultiGrainedSample};
use crate::error::{Error, Result};
use crate::text::Vocab;
use crate::vision::{BoundingBox, ImageTensor, VideoClip};

pub const COLORS: [[u8; 3]; 4] = [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    fn index(self) -> usize {
        self as usize
    }

    /// Whether pixel `(x, y)` of an `s`-pixel box belongs to the shape.
    fn covers(self, x: usize, y: usize, s: usize) -> bool {
        let (px, py, half) = (x as f64 + 0.5, y as f64 + 0.5, s as f64 / 2.0);
        match self {
            Shape::Square => true,
            Shape::Circle => (px - half).powi(2) + (py - half).powi(2) <= half * half,
            Shape::Triangle => (px - half).abs() <= py / 2.0,
        }
    }
}

/// Word lists for one language of captions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lexicon {
    English,
    /// A second, made-up language with the same grammar.
    Synthetic,
}

struct Words {
    article: &'static str,
    and: &'static str,
    colors: [&'static str; 4],
    shapes: [&'static str; 3],
    sizes: [&'static str; 2],
    left_of: &'static str,
    above: &'static str,
    moving: &'static str,
    /// right, left, down, up
    directions: [&'static str; 4],
    extra: [&'static str; 9],
}

const ENGLISH: Words = Words {
    article: "a",
    and: "and",
    colors: ["red", "green", "blue", "yellow"],
    shapes: ["circle", "square", "triangle"],
    sizes: ["small", "large"],
    left_of: "left of",
    above: "above",
    moving: "moving",
    directions: ["right", "left", "down", "up"],
    extra: ["the", "with", "image", "shape", "is", "at", "top", "bottom", "middle"],
};

const SYNTHETIC: Words = Words {
    article: "ein",
    and: "und",
    colors: ["rot", "gruen", "blau", "gelb"],
    shapes: ["kreis", "quadrat", "dreieck"],
    sizes: ["klein", "gross"],
    left_of: "links von",
    above: "ueber",
    moving: "bewegt",
    directions: ["rechts", "links", "runter", "hoch"],
    extra: ["das", "mit", "bild", "form", "ist", "bei", "oben", "unten", "mitte"],
};

impl Lexicon {
    fn words(self) -> &'static Words {
        match self {
            Lexicon::English => &ENGLISH,
            Lexicon::Synthetic => &SYNTHETIC,
        }
    }

    /// Every word the generator can emit, plus a few fillers.
    pub fn vocab(self) -> Vocab {
        let w = self.words();
        let mut words: Vec<&str> = vec![w.article, w.and];
        words.extend(w.colors);
        words.extend(w.shapes);
        words.extend(w.sizes);
        words.extend(w.left_of.split_whitespace());
        words.push(w.above);
        words.push(w.moving);
        words.extend(w.directions);
        words.extend(w.extra);
        let mut seen = HashSet::new();
        words.retain(|x| seen.insert(*x));
        Vocab::new(&words)
    }

    pub fn color_words(self) -> [&'static str; 4] {
        self.words().colors
    }

    pub fn shape_words(self) -> [&'static str; 3] {
        self.words().shapes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub image_size: usize,
    pub grid: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub max_regions: usize,
    pub lexicon: Lexicon,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            grid: 4,
            min_shapes: 1,
            max_shapes: 4,
            max_regions: 2,
            lexicon: Lexicon::English,
        }
    }
}

impl ShapesConfig {
    fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.image_size % self.grid != 0 {
            return Err(Error::Data(format!("grid {} does not divide image size {}", self.grid, self.image_size)));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Data("need 1 <= min_shapes <= max_shapes".into()));
        }
        if self.max_shapes > self.grid * self.grid || self.max_shapes > COLORS.len() * Shape::ALL.len() {
            return Err(Error::Data(format!(
                "cannot place {} distinct shapes on a {}x{} grid",
                self.max_shapes, self.grid, self.grid
            )));
        }
        Ok(())
    }

    fn patch(&self) -> usize {
        self.image_size / self.grid
    }
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    shape: Shape,
    color: usize,
    /// Cells spanned per side: 1 small, 2 large.
    span: usize,
    col: usize,
    row: usize,
}

impl Placed {
    fn bbox(&self, grid: usize) -> BoundingBox {
        let g = grid as f64;
        BoundingBox::from_corners(
            self.col as f64 / g,
            self.row as f64 / g,
            (self.col + self.span) as f64 / g,
            (self.row + self.span) as f64 / g,
        )
    }

    fn name(&self, w: &Words) -> String {
        format!("{} {}", w.colors[self.color], w.shapes[self.shape.index()])
    }
}

fn render(shapes: &[Placed], cfg: &ShapesConfig) -> ImageTensor {
    let mut img = ImageTensor::zeros(cfg.image_size, cfg.image_size, 3);
    let cell = cfg.patch();
    for s in shapes {
        let side = s.span * cell;
        let (x0, y0) = (s.col * cell, s.row * cell);
        let rgb = COLORS[s.color].map(|c| f32::from(c) / 255.0);
        for y in 0..side {
            for x in 0..side {
                if s.shape.covers(x, y, side) {
                    img.pixel_mut(y0 + y, x0 + x).copy_from_slice(&rgb);
                }
            }
        }
    }
    img
}

fn place<R: Rng>(cfg: &ShapesConfig, rng: &mut R) -> Option<Vec<Placed>> {
    let g = cfg.grid;
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut used = vec![false; g * g];
    let mut kinds = HashSet::new();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let placed = (0..64).find_map(|_| {
            let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let color = rng.random_range(0..COLORS.len());
            let span = if g >= 2 && rng.random_bool(0.5) { 2 } else { 1 };
            let col = rng.random_range(0..=g - span);
            let row = rng.random_range(0..=g - span);
            let free = (row..row + span).all(|r| (col..col + span).all(|c| !used[r * g + c]));
            (free && !kinds.contains(&(shape, color))).then_some(Placed {
                shape,
                color,
                span,
                col,
                row,
            })
        })?;
        for r in placed.row..placed.row + placed.span {
            for c in placed.col..placed.col + placed.span {
                used[r * g + c] = true;
            }
        }
        kinds.insert((placed.shape, placed.color));
        out.push(placed);
    }
    out.sort_by_key(|p| (p.col, p.row));
    Some(out)
}

fn regions<R: Rng>(shapes: &[Placed], cfg: &ShapesConfig, rng: &mut R) -> Vec<Annotation> {
    let w = cfg.lexicon.words();
    let mut cands = Vec::new();
    for a in shapes {
        for b in shapes {
            let relation = if a.col + a.span <= b.col {
                w.left_of
            } else if a.row + a.span <= b.row {
                w.above
            } else {
                continue;
            };
            cands.push(Annotation {
                bbox: a.bbox(cfg.grid).union(&b.bbox(cfg.grid)),
                text: format!("{} {relation} {}", a.name(w), b.name(w)),
                kind: AnnotationKind::Region,
            });
        }
    }
    cands.shuffle(rng);
    let mut out: Vec<Annotation> = Vec::new();
    for c in cands {
        if out.len() == cfg.max_regions {
            break;
        }
        if out.iter().all(|k| jaccard(&k.text, &c.text) <= 0.75) {
            out.push(c);
        }
    }
    out
}

/// `n` images with unique captions, object annotations for every shape and
/// up to `max_regions` spatial-relation annotations each.
pub fn generate_shapes_world(seed: u64, n: usize, cfg: &ShapesConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = cfg.lexicon.words();
    let mut captions = HashSet::new();
    let mut samples = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while samples.len() < n {
        attempts += 1;
        if attempts > 1000 + 100 * n {
            return Err(Error::Data(format!(
                "could not place {n} distinct images on a {}x{} grid",
                cfg.grid, cfg.grid
            )));
        }
        let Some(shapes) = place(cfg, &mut rng) else {
            continue;
        };
        let caption = shapes
            .iter()
            .map(|s| format!("{} {}", w.article, s.name(w)))
            .collect::<Vec<_>>()
            .join(&format!(" {} ", w.and));
        if !captions.insert(caption.clone()) {
            continue;
        }
        let mut annotations: Vec<Annotation> = shapes
            .iter()
            .map(|s| Annotation {
                bbox: s.bbox(cfg.grid),
                text: format!("{} {}", w.sizes[s.span - 1], s.name(w)),
                kind: AnnotationKind::Object,
            })
            .collect();
        annotations.extend(regions(&shapes, cfg, &mut rng));
        samples.push(MultiGrainedSample {
            id: format!("i{:06}", samples.len()),
            media: Media::Image(render(&shapes, cfg)),
            caption: Some(caption),
            annotations,
            frame_boxes: vec![],
        });
    }
    Dataset::new(samples, cfg.lexicon.vocab(), cfg.patch())
}

/// `n` clips of one small shape moving one cell per frame in a straight line.
/// With `frames == 1` every sample is a still image captioned without motion.
pub fn generate_shapes_video(seed: u64, n: usize, frames: usize, cfg: &ShapesConfig) -> Result<Dataset> {
    cfg.validate()?;
    let g = cfg.grid;
    if frames == 0 || frames > g {
        return Err(Error::Data(format!("cannot move a shape across {frames} frames on a {g}x{g} grid")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = cfg.lexicon.words();
    // right, left, down, up
    let steps: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let color = rng.random_range(0..COLORS.len());
        let dir = rng.random_range(0..steps.len());
        let (dx, dy) = steps[dir];
        let travel = frames as i64 - 1;
        let range = |d: i64| {
            let lo = if d < 0 { travel } else { 0 };
            let hi = if d > 0 { g as i64 - 1 - travel } else { g as i64 - 1 };
            (lo, hi)
        };
        let (cx0, cx1) = range(dx);
        let (cy0, cy1) = range(dy);
        let col = rng.random_range(cx0..=cx1);
        let row = rng.random_range(cy0..=cy1);
        let at = |f: usize| Placed {
            shape,
            color,
            span: 1,
            col: (col + dx * f as i64) as usize,
            row: (row + dy * f as i64) as usize,
        };
        let name = at(0).name(w);
        let sample = if frames == 1 {
            MultiGrainedSample {
                id: format!("v{i:06}"),
                media: Media::Image(render(&[at(0)], cfg)),
                caption: Some(name),
                annotations: vec![],
                frame_boxes: vec![at(0).bbox(g)],
            }
        } else {
            let clip = VideoClip::new(
                (0..frames).map(|f| render(&[at(f)], cfg)).collect(),
                (0..frames).map(|f| f as f64 * 0.5).collect(),
            )?;
            MultiGrainedSample {
                id: format!("v{i:06}"),
                media: Media::Video(clip),
                caption: Some(format!("{name} {} {}", w.moving, w.directions[dir])),
                annotations: vec![],
                frame_boxes: (0..frames).map(|f| at(f).bbox(g)).collect(),
            }
        };
        samples.push(sample);
    }
    Dataset::new(samples, cfg.lexicon.vocab(), cfg.patch())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, UNK};
    use crate::vision::select_patches;

    #[test]
    fn vocabularies_have_32_entries() {
        assert_eq!(Lexicon::English.vocab().len(), 32);
        assert_eq!(Lexicon::Synthetic.vocab().len(), 32);
    }

    #[test]
    fn regeneration_is_identical() {
        let cfg = ShapesConfig::default();
        let a = generate_shapes_world(3, 40, &cfg).unwrap();
        let b = generate_shapes_world(3, 40, &cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = generate_shapes_world(4, 40, &cfg).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn manifest_counts_records() {
        let d = generate_shapes_world(1, 256, &ShapesConfig::default()).unwrap();
        assert_eq!(d.manifest.records, 256);
        assert_eq!(d.manifest.counts["caption"], 256);
    }

    #[test]
    fn captions_are_unique_and_in_vocab() {
        for lexicon in [Lexicon::English, Lexicon::Synthetic] {
            let cfg = ShapesConfig {
                lexicon,
                ..ShapesConfig::default()
            };
            let d = generate_shapes_world(9, 200, &cfg).unwrap();
            let mut seen = HashSet::new();
            for s in &d.samples {
                let cap = s.caption.as_ref().unwrap();
                assert!(seen.insert(cap.clone()));
                let mut texts = vec![cap.as_str()];
                texts.extend(s.annotations.iter().map(|a| a.text.as_str()));
                for t in texts {
                    let toks = tokenize(t, &d.vocab, 64).unwrap();
                    assert!(!toks.ids.contains(&UNK), "{t}");
                    assert!(toks.ids.len() <= 16, "{t}");
                }
            }
        }
    }

    #[test]
    fn object_boxes_bound_their_shape_cells() {
        let cfg = ShapesConfig::default();
        let d = generate_shapes_world(5, 50, &cfg).unwrap();
        for s in &d.samples {
            let Media::Image(img) = &s.media else { panic!() };
            for a in s.annotations.iter().filter(|a| a.kind == AnnotationKind::Object) {
                let [x1, y1, x2, y2] = a.bbox.corners().map(|v| (v * 32.0).round() as usize);
                // lit pixels inside the box touch every edge of it
                let lit = |x: usize, y: usize| img.pixels[(y * 32 + x) * 3..][..3].iter().any(|&v| v > 0.0);
                assert!((x1..x2).any(|x| lit(x, y2 - 1)));
                assert!((y1..y2).any(|y| lit(x1 + (x2 - x1) / 2, y)));
                for &p in &select_patches(&a.bbox, 4) {
                    let (r, c) = (p / 4, p % 4);
                    assert!(r * 8 >= y1 && (r + 1) * 8 <= y2 && c * 8 >= x1 && (c + 1) * 8 <= x2);
                }
            }
        }
    }

    #[test]
    fn video_direction_matches_motion() {
        let cfg = ShapesConfig::default();
        let d = generate_shapes_video(2, 40, 3, &cfg).unwrap();
        for s in &d.samples {
            let cap = s.caption.as_ref().unwrap();
            let (first, last) = (s.frame_boxes[0], s.frame_boxes[2]);
            let (dx, dy) = (last.cx - first.cx, last.cy - first.cy);
            let dir = cap.split_whitespace().last().unwrap();
            match dir {
                "right" => assert!(dx > 0.0 && dy == 0.0),
                "left" => assert!(dx < 0.0 && dy == 0.0),
                "down" => assert!(dy > 0.0 && dx == 0.0),
                "up" => assert!(dy < 0.0 && dx == 0.0),
                other => panic!("unexpected direction {other}"),
            }
        }
    }

    #[test]
    fn single_frame_video_is_an_image() {
        let d = generate_shapes_video(2, 5, 1, &ShapesConfig::default()).unwrap();
        assert!(d.samples.iter().all(|s| matches!(s.media, Media::Image(_))));
    }

    #[test]
    fn too_many_frames_is_infeasible() {
        assert!(generate_shapes_video(2, 5, 5, &ShapesConfig::default()).is_err());
    }
}
