//! Dataset container: one JSON index document plus sibling binary blobs for
//! event streams and frames, with a small key-value manifest.

use crate::boxes::BoxXYWH;
use crate::error::{Error, Result};
use crate::event::{read_events_auto, write_events, Event, EventWindow};
use crate::frame::GrayImage;
use crate::labels::ClassLabel;
use crate::synth::{GeneratedSample, SceneGeometry};
use crate::text::AttributeSpans;
use std::fs;
use std::path::{Path, PathBuf};

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct ObjectEntry {
    class: ClassLabel,
    /// Box at `t_0`, `(cx, cy, w, h)` normalized.
    bbox: [f64; 4],
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct SampleEntry {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    events_blob: Option<String>,
    /// Inline fixture form: `[x, y, t, p]` rows.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    events: Option<Vec<(u16, u16, i64, i8)>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    frame_blob: Option<String>,
    t_a: i64,
    t_0: i64,
    t_b: i64,
    objects: Vec<ObjectEntry>,
    referred_index: usize,
    expression: String,
    spans: AttributeSpans,
    gt_box: [f64; 4],
    split: Split,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct IndexFile {
    version: u32,
    width: u16,
    height: u16,
    bins: usize,
    samples: Vec<SampleEntry>,
}

/// One loaded scene + expression + box unit.
#[derive(Debug, Clone)]
pub struct GroundingSample {
    pub window: EventWindow,
    pub frame: Option<GrayImage>,
    pub t_0: i64,
    /// All objects with their boxes at `t_0`.
    pub objects: Vec<(ClassLabel, BoxXYWH)>,
    pub referred_index: usize,
    pub expression: String,
    pub spans: AttributeSpans,
    pub gt_box: BoxXYWH,
    pub split: Split,
}

/// A fully loaded and validated corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub width: u16,
    pub height: u16,
    pub bins: usize,
    pub samples: Vec<GroundingSample>,
}

impl Corpus {
    pub fn split_samples(&self, split: Split) -> Vec<&GroundingSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Key-value manifest written alongside the index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub version: u32,
    pub data_seed: u64,
    pub num_scenes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub width: u16,
    pub height: u16,
    pub bins: usize,
    pub t_a: i64,
    pub t_b: i64,
    pub train_count: usize,
    pub val_count: usize,
}

impl CorpusManifest {
    pub fn to_text(&self) -> String {
        format!(
            "version={}\ndata_seed={}\nscenes={}\nobjects_min={}\nobjects_max={}\nwidth={}\nheight={}\nbins={}\nt_a={}\nt_b={}\ntrain_count={}\nval_count={}\n",
            self.version,
            self.data_seed,
            self.num_scenes,
            self.objects_min,
            self.objects_max,
            self.width,
            self.height,
            self.bins,
            self.t_a,
            self.t_b,
            self.train_count,
            self.val_count,
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line '{line}' lacks '='")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<String> {
            map.get(k).cloned().ok_or_else(|| Error::Format(format!("manifest missing '{k}'")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::Format(format!("manifest key '{k}' not a number")))
        };
        let inum = |k: &str| -> Result<i64> {
            get(k)?.parse().map_err(|_| Error::Format(format!("manifest key '{k}' not a number")))
        };
        Ok(CorpusManifest {
            version: num("version")? as u32,
            data_seed: num("data_seed")?,
            num_scenes: num("scenes")? as usize,
            objects_min: num("objects_min")? as usize,
            objects_max: num("objects_max")? as usize,
            width: num("width")? as u16,
            height: num("height")? as u16,
            bins: num("bins")? as usize,
            t_a: inum("t_a")?,
            t_b: inum("t_b")?,
            train_count: num("train_count")? as usize,
            val_count: num("val_count")? as usize,
        })
    }
}

/// FNV-1a over raw bytes, rendered as hex; used to tie checkpoints to the
/// corpus they were trained on.
pub fn manifest_hash(text: &str) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in text.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

/// Write samples, blobs, index, and manifest under `out_dir`.
pub fn write_corpus(
    out_dir: &Path,
    geometry: &SceneGeometry,
    samples: &[GeneratedSample],
    splits: &[Split],
    manifest: &CorpusManifest,
) -> Result<()> {
    if samples.len() != splits.len() {
        return Err(Error::InvalidArgument("split assignment length mismatch".into()));
    }
    let blob_dir = out_dir.join("blobs");
    fs::create_dir_all(&blob_dir)?;

    let mut entries = Vec::with_capacity(samples.len());
    for (i, (sample, split)) in samples.iter().zip(splits).enumerate() {
        let id = format!("scene_{i:05}");
        let events_rel = format!("blobs/{id}.evt");
        let frame_rel = format!("blobs/{id}.gray");

        let mut event_bytes = Vec::new();
        write_events(
            &mut event_bytes,
            geometry.width,
            geometry.height,
            sample.window.events(),
        )?;
        fs::write(out_dir.join(&events_rel), event_bytes)?;
        fs::write(out_dir.join(&frame_rel), &sample.frame.pixels)?;

        let boxes = sample.boxes_at_t0();
        entries.push(SampleEntry {
            id,
            events_blob: Some(events_rel),
            events: None,
            frame_blob: Some(frame_rel),
            t_a: geometry.t_a,
            t_0: geometry.t_0(),
            t_b: geometry.t_b,
            objects: sample
                .objects
                .iter()
                .zip(&boxes)
                .map(|(o, b)| ObjectEntry {
                    class: o.class_label,
                    bbox: [b.cx, b.cy, b.w, b.h],
                })
                .collect(),
            referred_index: sample.referred_index,
            expression: sample.expression.clone(),
            spans: sample.spans.clone(),
            gt_box: [sample.gt_box.cx, sample.gt_box.cy, sample.gt_box.w, sample.gt_box.h],
            split: *split,
        });
    }

    let index = IndexFile {
        version: DATASET_VERSION,
        width: geometry.width,
        height: geometry.height,
        bins: geometry.bins,
        samples: entries,
    };
    let mut json = serde_json::to_vec_pretty(&index)?;
    json.push(b'\n');
    fs::write(out_dir.join("index.json"), json)?;
    fs::write(out_dir.join("manifest.txt"), manifest.to_text())?;
    Ok(())
}

fn violation(index: usize, message: impl Into<String>) -> Error {
    Error::InvariantViolation { index, message: message.into() }
}

fn parse_box(index: usize, raw: [f64; 4], what: &str) -> Result<BoxXYWH> {
    BoxXYWH::new(raw[0], raw[1], raw[2], raw[3])
        .map_err(|e| violation(index, format!("{what}: {e}")))
}

/// Load and validate a corpus directory. Validation fails fast with the
/// index of the first offending sample.
pub fn load_dataset(dir: &Path) -> Result<Corpus> {
    let index_path = dir.join("index.json");
    if !index_path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no dataset index at {}", index_path.display()),
        )));
    }
    let index: IndexFile = serde_json::from_slice(&fs::read(&index_path)?)?;
    if index.version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: index.version.to_string(),
            supported: DATASET_VERSION.to_string(),
        });
    }
    if index.width == 0 || index.height == 0 || index.bins == 0 {
        return Err(Error::InvalidConfiguration("dataset geometry is degenerate".into()));
    }

    let mut samples = Vec::with_capacity(index.samples.len());
    for (i, entry) in index.samples.into_iter().enumerate() {
        if entry.t_a >= entry.t_b {
            return Err(violation(i, "window start must precede end"));
        }
        if entry.t_0 < entry.t_a || entry.t_0 > entry.t_b {
            return Err(violation(i, "t_0 outside the observation window"));
        }

        let events: Vec<Event> = match (&entry.events_blob, &entry.events) {
            (Some(rel), _) => {
                let path = resolve_blob(dir, rel);
                let bytes = fs::read(&path).map_err(|_| {
                    violation(i, format!("missing events blob '{}'", path.display()))
                })?;
                let (w, h, events) = read_events_auto(&bytes)
                    .map_err(|e| violation(i, format!("events blob: {e}")))?;
                if w != index.width || h != index.height {
                    return Err(violation(i, "events blob geometry mismatch"));
                }
                events
            }
            (None, Some(rows)) => rows
                .iter()
                .map(|&(x, y, t, p)| Event::new(x, y, t, p))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| violation(i, format!("inline events: {e}")))?,
            (None, None) => return Err(violation(i, "sample carries no events")),
        };
        let window = EventWindow::new(events, entry.t_a, entry.t_b, index.width, index.height)
            .map_err(|e| violation(i, format!("event window: {e}")))?;

        let frame = match &entry.frame_blob {
            Some(rel) => {
                let path = resolve_blob(dir, rel);
                let bytes = fs::read(&path).map_err(|_| {
                    violation(i, format!("missing frame blob '{}'", path.display()))
                })?;
                Some(
                    GrayImage::new(index.width, index.height, bytes)
                        .map_err(|e| violation(i, format!("frame blob: {e}")))?,
                )
            }
            None => None,
        };

        if entry.objects.is_empty() {
            return Err(violation(i, "sample has no objects"));
        }
        if entry.referred_index >= entry.objects.len() {
            return Err(violation(i, "referred index out of range"));
        }
        if entry.expression.trim().is_empty() {
            return Err(violation(i, "expression is empty"));
        }
        let objects = entry
            .objects
            .iter()
            .map(|o| Ok((o.class, parse_box(i, o.bbox, "object box")?)))
            .collect::<Result<Vec<_>>>()?;
        let gt_box = parse_box(i, entry.gt_box, "ground-truth box")?;

        samples.push(GroundingSample {
            window,
            frame,
            t_0: entry.t_0,
            objects,
            referred_index: entry.referred_index,
            expression: entry.expression,
            spans: entry.spans,
            gt_box,
            split: entry.split,
        });
    }
    Ok(Corpus { width: index.width, height: index.height, bins: index.bins, samples })
}

fn resolve_blob(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Load the manifest file of a corpus directory.
pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    CorpusManifest::parse(&text)
}
