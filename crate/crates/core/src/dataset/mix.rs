use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schema::{AnnotationKind, Dataset, MultiGrainedSample};
use crate::error::{Error, Result};

/// Named sources with sampling weights, e.g. `caption:1,object:1,region:1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub entries: Vec<(String, f64)>,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("empty mix".into()));
        }
        for (name, w) in &self.entries {
            if !(w.is_finite() && *w > 0.0) {
                return Err(Error::Config(format!("mix weight for {name} must be positive, got {w}")));
            }
        }
        Ok(())
    }

    /// Weights scaled to sum to one.
    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.entries.iter().map(|e| e.1).sum();
        self.entries.iter().map(|e| e.1 / total).collect()
    }
}

impl FromStr for MixSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, w) = part.split_once(':').unwrap_or((part, "1"));
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad mix weight in {part:?}")))?;
            entries.push((name.trim().to_string(), w));
        }
        let spec = Self { entries };
        spec.validate()?;
        Ok(spec)
    }
}

impl std::fmt::Display for MixSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.entries.iter().map(|(n, w)| format!("{n}:{w}")).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Which part of each sample a source exposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    /// Caption and annotations.
    Full,
    /// Caption only.
    Caption,
    /// Annotations only, no caption.
    Annotated,
    /// Object annotations only.
    Object,
    /// Region annotations only.
    Region,
}

impl View {
    pub fn apply(self, s: &MultiGrainedSample) -> Option<MultiGrainedSample> {
        let mut out = s.clone();
        let keep_kind = |k: Option<AnnotationKind>, out: &mut MultiGrainedSample| {
            out.caption = None;
            if let Some(k) = k {
                out.annotations.retain(|a| a.kind == k);
            }
        };
        match self {
            View::Full => {}
            View::Caption => out.annotations.clear(),
            View::Annotated => keep_kind(None, &mut out),
            View::Object => keep_kind(Some(AnnotationKind::Object), &mut out),
            View::Region => keep_kind(Some(AnnotationKind::Region), &mut out),
        }
        (out.caption.is_some() || !out.annotations.is_empty()).then_some(out)
    }
}

/// A named pool of samples to draw from.
#[derive(Clone, Debug)]
pub struct Source {
    pub name: String,
    pub samples: Vec<Arc<MultiGrainedSample>>,
}

impl Source {
    pub fn from_view(name: &str, data: &Dataset, view: View) -> Result<Self> {
        let samples: Vec<_> = data
            .samples
            .iter()
            .filter_map(|s| view.apply(s).map(Arc::new))
            .collect();
        if samples.is_empty() {
            return Err(Error::Data(format!("source {name} has no samples")));
        }
        Ok(Self {
            name: name.to_string(),
            samples,
        })
    }
}

/// Resolves mix names against an image dataset and an optional video dataset:
/// `caption`, `object`, `region`, `annotated`, `full` and `video`.
pub fn resolve_sources(mix: &MixSpec, images: &Dataset, videos: Option<&Dataset>) -> Result<Vec<Source>> {
    mix.validate()?;
    mix.entries
        .iter()
        .map(|(name, _)| {
            let view = match name.as_str() {
                "caption" => View::Caption,
                "object" => View::Object,
                "region" => View::Region,
                "annotated" => View::Annotated,
                "full" => View::Full,
                "video" => {
                    let v = videos.ok_or_else(|| Error::Config("mix uses video but no video data given".into()))?;
                    return Source::from_view(name, v, View::Full);
                }
                other => return Err(Error::Config(format!("unknown mix source {other:?}"))),
            };
            Source::from_view(name, images, view)
        })
        .collect()
}

/// One drawn sample with the source it came from.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub source: usize,
    pub sample: Arc<MultiGrainedSample>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn samples(&self) -> Vec<&MultiGrainedSample> {
        self.items.iter().map(|i| i.sample.as_ref()).collect()
    }
}

/// Epoch/position cursor of every source; enough to resume sampling exactly.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub cursors: Vec<(u64, usize)>,
}

/// Draws sources i.i.d. by weight and walks each source in seeded epoch order.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    sources: Vec<Source>,
    weights: Vec<f64>,
    seed: u64,
    state: SamplerState,
    orders: Vec<Vec<usize>>,
}

impl BatchSampler {
    pub fn new(sources: Vec<Source>, mix: &MixSpec, seed: u64) -> Result<Self> {
        mix.validate()?;
        if sources.len() != mix.entries.len() {
            return Err(Error::Config("one source per mix entry required".into()));
        }
        let state = SamplerState {
            cursors: vec![(0, 0); sources.len()],
        };
        let mut s = Self {
            weights: mix.normalized(),
            orders: vec![Vec::new(); sources.len()],
            sources,
            seed,
            state,
        };
        s.rebuild_orders();
        Ok(s)
    }

    fn order(&self, source: usize, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((source as u64) << 32) ^ epoch);
        let mut idx: Vec<usize> = (0..self.sources[source].samples.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }

    fn rebuild_orders(&mut self) {
        self.orders = (0..self.sources.len())
            .map(|s| self.order(s, self.state.cursors[s].0))
            .collect();
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn set_state(&mut self, state: SamplerState) -> Result<()> {
        if state.cursors.len() != self.sources.len()
            || state
                .cursors
                .iter()
                .zip(&self.sources)
                .any(|(c, s)| c.1 >= s.samples.len())
        {
            return Err(Error::Config("sampler state does not fit these sources".into()));
        }
        self.state = state;
        self.rebuild_orders();
        Ok(())
    }

    fn next_from(&mut self, s: usize) -> Arc<MultiGrainedSample> {
        let (epoch, pos) = self.state.cursors[s];
        let sample = self.sources[s].samples[self.orders[s][pos]].clone();
        if pos + 1 == self.orders[s].len() {
            self.state.cursors[s] = (epoch + 1, 0);
            self.orders[s] = self.order(s, epoch + 1);
        } else {
            self.state.cursors[s] = (epoch, pos + 1);
        }
        sample
    }

    /// Next mixed batch; the source of each slot is drawn from `rng`.
    pub fn assemble_batch<R: Rng + ?Sized>(&mut self, batch_size: usize, rng: &mut R) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut items = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let mut u: f64 = rng.random();
            let mut source = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                if u < *w {
                    source = i;
                    break;
                }
                u -= w;
            }
            items.push(BatchItem {
                source,
                sample: self.next_from(source),
            });
        }
        Ok(Batch { items })
    }
}
