//! On-disk dataset container.
//!
//! A split named `NAME` is two files in one directory:
//!
//! * `NAME.jsonl`: first line a [`Manifest`] header, then one JSON record
//!   per sample with its task, instruction ids, context segments and byte
//!   ranges into the blob for every pixel array.
//! * `NAME.bin`: little-endian `f32` values, each array stored row-major.
//!   Edit masks are stored as `0.0` / `1.0`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tasks::{gen_sample, SampleSegment, TaskSample};
use super::{SynthConfig, Task};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "interleave-synth";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub synth: SynthConfig,
    /// Samples per task; missing tasks get none.
    pub counts: BTreeMap<Task, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub seed: u64,
    pub synth: SynthConfig,
    pub samples: usize,
    pub blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobRef {
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SegmentRecord {
    Text { ids: Vec<usize> },
    Pixels { data: BlobRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleRecord {
    id: usize,
    task: Task,
    instruction: Vec<usize>,
    context: Vec<SegmentRecord>,
    target: BlobRef,
    source: BlobRef,
    edit_mask: BlobRef,
}

fn split_salt(split: &str) -> u64 {
    // FNV-1a keeps split streams apart without extra dependencies
    split
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Generator for sample `index` of `task`; independent of every other
/// sample so generation parallelizes without changing results.
pub(crate) fn sample_rng(seed: u64, split: &str, task: Task, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split_salt(split));
    rng.set_stream(((task.index() as u64) << 40) | index as u64);
    rng
}

struct BlobWriter {
    buf: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, shape: &[usize], values: impl Iterator<Item = f32>) -> BlobRef {
        let offset = self.buf.len() as u64;
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        BlobRef {
            shape: shape.to_vec(),
            offset,
            bytes: self.buf.len() as u64 - offset,
        }
    }

    fn clip(&mut self, a: &Array4<f32>) -> BlobRef {
        self.push(a.shape(), a.iter().copied())
    }
}

/// Generate a split into `dir`. Re-running with the same arguments writes
/// byte-identical files.
pub fn make_dataset(spec: &DatasetSpec, seed: u64, dir: &Path, split: &str) -> Result<Manifest> {
    spec.synth.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let jobs: Vec<(Task, usize)> = spec
        .counts
        .iter()
        .flat_map(|(&task, &n)| (0..n).map(move |i| (task, i)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(task, i)| gen_sample(task, &spec.synth, &mut sample_rng(seed, split, task, i)))
        .collect::<Result<Vec<_>>>()?;

    let blob_name = format!("{split}.bin");
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: VERSION,
        split: split.into(),
        seed,
        synth: spec.synth,
        samples: samples.len(),
        blob: blob_name.clone(),
    };
    let mut blob = BlobWriter { buf: Vec::new() };
    let mut lines = Vec::with_capacity(samples.len() + 1);
    lines.push(serde_json::to_string(&manifest).expect("serializable"));
    for (id, s) in samples.iter().enumerate() {
        let context = s
            .context
            .iter()
            .map(|seg| match seg {
                SampleSegment::Text(ids) => SegmentRecord::Text { ids: ids.clone() },
                SampleSegment::Pixels(px) => SegmentRecord::Pixels { data: blob.clip(px) },
            })
            .collect();
        let rec = SampleRecord {
            id,
            task: s.task,
            instruction: s.instruction.clone(),
            context,
            target: blob.clip(&s.target),
            source: blob.clip(&s.source),
            edit_mask: blob.push(s.edit_mask.shape(), s.edit_mask.iter().map(|&m| f32::from(u8::from(m)))),
        };
        lines.push(serde_json::to_string(&rec).expect("serializable"));
    }
    let manifest_path = dir.join(format!("{split}.jsonl"));
    write_file(&manifest_path, (lines.join("\n") + "\n").as_bytes())?;
    write_file(&dir.join(&blob_name), &blob.buf)?;
    Ok(manifest)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

struct BlobReader<'a> {
    buf: &'a [u8],
    path: &'a PathBuf,
}

impl BlobReader<'_> {
    fn values(&self, r: &BlobRef, rank: usize) -> Result<Vec<f32>> {
        let n: usize = r.shape.iter().product();
        let end = r.offset.checked_add(r.bytes);
        if r.shape.len() != rank || r.bytes != 4 * n as u64 || end.is_none_or(|e| e > self.buf.len() as u64) {
            return Err(Error::Format(format!(
                "blob range {}+{} with shape {:?} does not fit {}",
                r.offset,
                r.bytes,
                r.shape,
                self.path.display()
            )));
        }
        let start = r.offset as usize;
        Ok(self.buf[start..start + r.bytes as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn clip(&self, r: &BlobRef) -> Result<Array4<f32>> {
        let v = self.values(r, 4)?;
        Ok(Array4::from_shape_vec((r.shape[0], r.shape[1], r.shape[2], r.shape[3]), v).expect("checked length"))
    }

    fn mask(&self, r: &BlobRef) -> Result<Array3<bool>> {
        let v = self.values(r, 3)?;
        Ok(Array3::from_shape_vec((r.shape[0], r.shape[1], r.shape[2]), v.into_iter().map(|x| x != 0.0).collect())
            .expect("checked length"))
    }
}

/// Load a split written by [`make_dataset`].
pub fn read_dataset(dir: &Path, split: &str) -> Result<(Manifest, Vec<TaskSample>)> {
    let manifest_path = dir.join(format!("{split}.jsonl"));
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |what: String| Error::Format(format!("{}: {what}", manifest_path.display()));
    let header = lines
        .next()
        .ok_or_else(|| bad("missing header line".into()))?
        .map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&header).map_err(|e| bad(format!("header: {e}")))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != VERSION {
        return Err(bad(format!("unsupported format {} v{}", manifest.format, manifest.version)));
    }
    let blob_path = dir.join(&manifest.blob);
    let buf = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let reader = BlobReader {
        buf: &buf,
        path: &blob_path,
    };
    let mut samples = Vec::with_capacity(manifest.samples);
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| bad(format!("record {n}: {e}")))?;
        let context = rec
            .context
            .iter()
            .map(|s| match s {
                SegmentRecord::Text { ids } => Ok(SampleSegment::Text(ids.clone())),
                SegmentRecord::Pixels { data } => Ok(SampleSegment::Pixels(reader.clip(data)?)),
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(TaskSample {
            task: rec.task,
            instruction: rec.instruction,
            context,
            target: reader.clip(&rec.target)?,
            source: reader.clip(&rec.source)?,
            edit_mask: reader.mask(&rec.edit_mask)?,
        });
    }
    if samples.len() != manifest.samples {
        return Err(bad(format!("header announces {} samples, found {}", manifest.samples, samples.len())));
    }
    Ok((manifest, samples))
}
