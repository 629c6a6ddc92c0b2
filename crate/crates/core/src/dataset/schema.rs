use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Vocab;
use crate::vision::{BoundingBox, ImageTensor, VideoClip};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "samples.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
const MEDIA_DIR: &str = "media";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    Object,
    Region,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub text: String,
    pub kind: AnnotationKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Media {
    Image(ImageTensor),
    Video(VideoClip),
}

impl Media {
    /// `(height, width, channels)` of the image or of each frame.
    pub fn dims(&self) -> (usize, usize, usize) {
        let img = match self {
            Media::Image(i) => i,
            Media::Video(v) => &v.frames[0],
        };
        (img.height, img.width, img.channels)
    }

    pub fn is_video(&self) -> bool {
        matches!(self, Media::Video(_))
    }

    pub fn as_image(&self) -> Option<&ImageTensor> {
        match self {
            Media::Image(i) => Some(i),
            Media::Video(_) => None,
        }
    }
}

/// An image or video with an optional caption and any number of box-level
/// annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiGrainedSample {
    pub id: String,
    pub media: Media,
    pub caption: Option<String>,
    pub annotations: Vec<Annotation>,
    /// Per-frame boxes of the moving shape in a generated clip.
    pub frame_boxes: Vec<BoundingBox>,
}

impl MultiGrainedSample {
    pub fn validate(&self) -> Result<()> {
        if self.caption.is_none() && self.annotations.is_empty() {
            return Err(Error::Data(format!("sample {} has neither caption nor annotations", self.id)));
        }
        for a in &self.annotations {
            a.bbox
                .validate()
                .map_err(|e| Error::Data(format!("sample {}: {e}", self.id)))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub records: usize,
    pub counts: BTreeMap<String, usize>,
    pub vocab: String,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "dataset format version {} (expected {DATASET_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.patch_size == 0 || self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(Error::Data(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        Ok(())
    }
}

/// Per-kind record counts: media type plus caption/object/region presence.
pub fn count_kinds(samples: &[Arc<MultiGrainedSample>]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        let media = if s.media.is_video() { "video" } else { "image" };
        *counts.entry(media.to_string()).or_insert(0) += 1;
        if s.caption.is_some() {
            *counts.entry("caption".to_string()).or_insert(0) += 1;
        }
        for a in &s.annotations {
            let k = match a.kind {
                AnnotationKind::Object => "object",
                AnnotationKind::Region => "region",
            };
            *counts.entry(k.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Samples plus the vocabulary and manifest they ship with.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub vocab: Vocab,
    pub samples: Vec<Arc<MultiGrainedSample>>,
}

impl Dataset {
    pub fn new(samples: Vec<MultiGrainedSample>, vocab: Vocab, patch_size: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Data("dataset has no samples".into()))?;
        let (h, w, c) = first.media.dims();
        for s in &samples {
            s.validate()?;
            if s.media.dims() != (h, w, c) {
                return Err(Error::Data(format!("sample {} differs in media size", s.id)));
            }
        }
        let samples: Vec<_> = samples.into_iter().map(Arc::new).collect();
        let manifest = DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            image_height: h,
            image_width: w,
            channels: c,
            patch_size,
            records: samples.len(),
            counts: count_kinds(&samples),
            vocab: VOCAB_FILE.to_string(),
        };
        manifest.validate()?;
        Ok(Self {
            manifest,
            vocab,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes manifest, records, media sidecars and vocab under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(MEDIA_DIR))?;
        let mut records = Vec::new();
        for s in &self.samples {
            let media = match &s.media {
                Media::Image(img) => {
                    let rel = format!("{MEDIA_DIR}/{}.ppm", s.id);
                    fs::write(dir.join(&rel), encode_ppm(img)?)?;
                    MediaRecord::Image { path: rel }
                }
                Media::Video(clip) => {
                    let mut paths = Vec::with_capacity(clip.frames.len());
                    for (f, frame) in clip.frames.iter().enumerate() {
                        let rel = format!("{MEDIA_DIR}/{}_f{f}.ppm", s.id);
                        fs::write(dir.join(&rel), encode_ppm(frame)?)?;
                        paths.push(rel);
                    }
                    MediaRecord::Video {
                        paths,
                        timestamps: clip.timestamps.clone(),
                    }
                }
            };
            records.push(Record {
                id: s.id.clone(),
                media,
                caption: s.caption.clone(),
                annotations: s
                    .annotations
                    .iter()
                    .map(|a| AnnotationRecord {
                        cx: a.bbox.cx,
                        cy: a.bbox.cy,
                        w: a.bbox.w,
                        h: a.bbox.h,
                        text: a.text.clone(),
                        kind: a.kind,
                    })
                    .collect(),
                frame_boxes: s.frame_boxes.iter().map(|b| b.to_array()).collect(),
            });
        }
        let mut out = fs::File::create(dir.join(RECORDS_FILE))?;
        for r in &records {
            writeln!(out, "{}", serde_json::to_string(r)?)?;
        }
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        self.vocab.save(&dir.join(&self.manifest.vocab))?;
        Ok(())
    }

    /// Loads a dataset directory; records are validated but not filtered.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        manifest.validate()?;
        let vocab = Vocab::load(&dir.join(&manifest.vocab))?;
        let samples = read_records(dir)?;
        if samples.len() != manifest.records {
            return Err(Error::Data(format!(
                "manifest lists {} records, found {}",
                manifest.records,
                samples.len()
            )));
        }
        for s in &samples {
            s.validate()?;
        }
        let samples: Vec<_> = samples.into_iter().map(Arc::new).collect();
        Ok(Self {
            manifest,
            vocab,
            samples,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum MediaRecord {
    Image { path: String },
    Video { paths: Vec<String>, timestamps: Vec<f64> },
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    text: String,
    kind: AnnotationKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    media: MediaRecord,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    annotations: Vec<AnnotationRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    frame_boxes: Vec<[f64; 4]>,
}

/// Parses `samples.jsonl` and its media sidecars without validating boxes.
pub fn read_records(dir: &Path) -> Result<Vec<MultiGrainedSample>> {
    let file = fs::File::open(dir.join(RECORDS_FILE))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{RECORDS_FILE}:{}: {e}", lineno + 1)))?;
        let media = match r.media {
            MediaRecord::Image { path } => Media::Image(decode_ppm(&fs::read(dir.join(path))?)?),
            MediaRecord::Video { paths, timestamps } => {
                let frames = paths
                    .iter()
                    .map(|p| decode_ppm(&fs::read(dir.join(p))?))
                    .collect::<Result<Vec<_>>>()?;
                Media::Video(VideoClip::new(frames, timestamps)?)
            }
        };
        let bbox = |[cx, cy, w, h]: [f64; 4]| BoundingBox { cx, cy, w, h };
        samples.push(MultiGrainedSample {
            id: r.id,
            media,
            caption: r.caption,
            annotations: r
                .annotations
                .into_iter()
                .map(|a| Annotation {
                    bbox: bbox([a.cx, a.cy, a.w, a.h]),
                    text: a.text,
                    kind: a.kind,
                })
                .collect(),
            frame_boxes: r.frame_boxes.into_iter().map(bbox).collect(),
        });
    }
    Ok(samples)
}

/// Binary portable pixmap (`P6`, 8-bit). Pixel values are rounded to `k/255`.
pub fn encode_ppm(img: &ImageTensor) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::InvalidInput(format!("PPM needs 3 channels, got {}", img.channels)));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let bad = |msg: &str| Error::Data(format!("malformed PPM: {msg}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("expected P6"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    let data = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated pixels"))?;
    ImageTensor::new(h, w, 3, data.iter().map(|&b| f32::from(b) / 255.0).collect())
}
