//! Deterministic dataset loaders (CIFAR-10 binary batches, IDX files,
//! token-sequence text files, PCM WAV directories) and seeded synthetic
//! datasets that make the test suite self-contained.

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{GraftError, Result};
use crate::frontends::{Image, Payload};
use crate::heads::LabelTarget;
use crate::num::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub payload: Payload,
    pub target: LabelTarget,
}

/// Train/test material for one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub classes: usize,
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches
// ---------------------------------------------------------------------------

pub const CIFAR_RECORD_BYTES: usize = 3073; // 1 label byte + 3×1024 pixels
pub const CIFAR_CLASSES: usize = 10;

/// Reads one binary batch file: per record 1 label byte then 3072 pixel
/// bytes, channel-planar R,G,B, row-major within each plane.
pub fn load_cifar_batch(path: &Path) -> Result<Vec<LabeledExample>> {
    let bytes = std::fs::read(path)
        .map_err(|e| GraftError::DataFormat(format!("missing file {}: {e}", path.display())))?;
    parse_cifar_records(&bytes, &path.display().to_string())
}

pub fn parse_cifar_records(bytes: &[u8], origin: &str) -> Result<Vec<LabeledExample>> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(GraftError::DataFormat(format!(
            "{origin}: length {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let mut examples = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(GraftError::DataFormat(format!(
                "{origin}: record {i} has label {label} (expected 0..{CIFAR_CLASSES})"
            )));
        }
        let mut data = vec![0.0f32; 32 * 32 * 3];
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let v = record[1 + c * 1024 + y * 32 + x];
                    data[(y * 32 + x) * 3 + c] = v as f32 / 255.0;
                }
            }
        }
        examples.push(LabeledExample {
            payload: Payload::Image(Image::new(32, 32, 3, data)),
            target: LabelTarget::Class(label),
        });
    }
    Ok(examples)
}

/// Writes images back into the binary batch format (fixture tooling).
pub fn write_cifar_batch(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut bytes = Vec::with_capacity(examples.len() * CIFAR_RECORD_BYTES);
    for ex in examples {
        let (Payload::Image(img), LabelTarget::Class(label)) = (&ex.payload, &ex.target) else {
            return Err(GraftError::Config(
                "cifar batch writer needs single-label images".into(),
            ));
        };
        if img.height != 32 || img.width != 32 || img.channels != 3 {
            return Err(GraftError::ShapeMismatch(format!(
                "cifar record needs 32x32x3 images, got {}x{}x{}",
                img.height, img.width, img.channels
            )));
        }
        bytes.push(*label as u8);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    bytes.push((img.at(y, x, c) * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Standard layout: `data_batch_1..5.bin` for training, `test_batch.bin`
/// for evaluation; 50,000/10,000 split sizes enforced.
pub fn load_cifar10(dir: &Path) -> Result<TaskData> {
    let mut train = Vec::with_capacity(50_000);
    for i in 1..=5 {
        train.extend(load_cifar_batch(&dir.join(format!("data_batch_{i}.bin")))?);
    }
    let test = load_cifar_batch(&dir.join("test_batch.bin"))?;
    if train.len() != 50_000 || test.len() != 10_000 {
        return Err(GraftError::DataFormat(format!(
            "cifar-10 split sizes {}/{} (expected 50000/10000)",
            train.len(),
            test.len()
        )));
    }
    Ok(TaskData {
        train,
        test,
        classes: CIFAR_CLASSES,
    })
}

// ---------------------------------------------------------------------------
// IDX (Fashion-MNIST)
// ---------------------------------------------------------------------------

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(reader: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader
        .read_exact(&mut buf)
        .map_err(|e| GraftError::DataFormat(format!("{what}: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// IDX image file: magic 0x00000803, then big-endian count/rows/cols and
/// one byte per pixel.
pub fn load_idx_images(path: &Path) -> Result<Vec<Image>> {
    let file = std::fs::read(path)
        .map_err(|e| GraftError::DataFormat(format!("missing file {}: {e}", path.display())))?;
    let mut reader = file.as_slice();
    let magic = read_u32_be(&mut reader, "idx image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(GraftError::DataFormat(format!(
            "{}: bad image magic {magic:#010x} (expected {IDX_IMAGE_MAGIC:#010x})",
            path.display()
        )));
    }
    let count = read_u32_be(&mut reader, "idx image count")? as usize;
    let rows = read_u32_be(&mut reader, "idx rows")? as usize;
    let cols = read_u32_be(&mut reader, "idx cols")? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    reader
        .read_exact(&mut pixels)
        .map_err(|e| GraftError::DataFormat(format!("{}: pixel data: {e}", path.display())))?;
    Ok(pixels
        .chunks_exact(rows * cols)
        .map(|chunk| {
            Image::new(
                rows,
                cols,
                1,
                chunk.iter().map(|&b| b as f32 / 255.0).collect(),
            )
        })
        .collect())
}

/// IDX label file: magic 0x00000801, big-endian count, one byte per label.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let file = std::fs::read(path)
        .map_err(|e| GraftError::DataFormat(format!("missing file {}: {e}", path.display())))?;
    let mut reader = file.as_slice();
    let magic = read_u32_be(&mut reader, "idx label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(GraftError::DataFormat(format!(
            "{}: bad label magic {magic:#010x} (expected {IDX_LABEL_MAGIC:#010x})",
            path.display()
        )));
    }
    let count = read_u32_be(&mut reader, "idx label count")? as usize;
    let mut labels = vec![0u8; count];
    reader
        .read_exact(&mut labels)
        .map_err(|e| GraftError::DataFormat(format!("{}: label data: {e}", path.display())))?;
    Ok(labels)
}

fn zip_idx(images: Vec<Image>, labels: Vec<u8>, classes: usize) -> Result<Vec<LabeledExample>> {
    if images.len() != labels.len() {
        return Err(GraftError::DataFormat(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    images
        .into_iter()
        .zip(labels)
        .map(|(img, label)| {
            if (label as usize) >= classes {
                return Err(GraftError::DataFormat(format!(
                    "label {label} out of range for {classes} classes"
                )));
            }
            Ok(LabeledExample {
                payload: Payload::Image(img),
                target: LabelTarget::Class(label as usize),
            })
        })
        .collect()
}

/// Fashion-MNIST: 28×28 grayscale in [0,1]; zero-padding to 32×32 happens
/// at the task layer.
pub fn load_fashion_mnist(dir: &Path) -> Result<TaskData> {
    let train = zip_idx(
        load_idx_images(&dir.join("train-images-idx3-ubyte"))?,
        load_idx_labels(&dir.join("train-labels-idx1-ubyte"))?,
        10,
    )?;
    let test = zip_idx(
        load_idx_images(&dir.join("t10k-images-idx3-ubyte"))?,
        load_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?,
        10,
    )?;
    Ok(TaskData {
        train,
        test,
        classes: 10,
    })
}

// ---------------------------------------------------------------------------
// Token-sequence text files (coarse acoustic tokens)
// ---------------------------------------------------------------------------

pub const TOKENS_PER_SECOND: usize = 75;
pub const TOKEN_VOCAB: u32 = 1024;

/// Line-delimited records: class id, then exactly `expected_len` token ids
/// in `[0, vocab)`, whitespace-separated.
pub fn load_token_file(
    path: &Path,
    expected_len: usize,
    vocab: u32,
    classes: usize,
) -> Result<Vec<LabeledExample>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GraftError::DataFormat(format!("missing file {}: {e}", path.display())))?;
    parse_token_lines(&text, expected_len, vocab, classes)
}

pub fn parse_token_lines(
    text: &str,
    expected_len: usize,
    vocab: u32,
    classes: usize,
) -> Result<Vec<LabeledExample>> {
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let label: usize = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|e| GraftError::DataFormat(format!("line {}: bad class id: {e}", lineno + 1)))?;
        if label >= classes {
            return Err(GraftError::DataFormat(format!(
                "line {}: class id {label} out of range for {classes} classes",
                lineno + 1
            )));
        }
        let mut ids = Vec::with_capacity(expected_len);
        for field in fields {
            let id: u32 = field.parse().map_err(|e| {
                GraftError::DataFormat(format!("line {}: bad token id: {e}", lineno + 1))
            })?;
            if id >= vocab {
                return Err(GraftError::TokenOutOfRange { id, vocab });
            }
            ids.push(id);
        }
        if ids.len() != expected_len {
            return Err(GraftError::DataFormat(format!(
                "line {}: {} token ids (expected {expected_len})",
                lineno + 1,
                ids.len()
            )));
        }
        examples.push(LabeledExample {
            payload: Payload::Tokens(ids),
            target: LabelTarget::Class(label),
        });
    }
    Ok(examples)
}

pub fn write_token_file(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        let (Payload::Tokens(ids), LabelTarget::Class(label)) = (&ex.payload, &ex.target) else {
            return Err(GraftError::Config(
                "token file writer needs single-label token sequences".into(),
            ));
        };
        out.push_str(&label.to_string());
        for id in ids {
            out.push(' ');
            out.push_str(&id.to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// PCM WAV (RIFF, 16-bit little-endian, mono, 16 kHz) + label sidecar
// ---------------------------------------------------------------------------

pub const WAV_SAMPLE_RATE: u32 = 16_000;

/// Accepts only PCM 16-bit mono at 16 kHz; everything else is rejected so
/// the numeric path stays deterministic (no resampling).
pub fn read_wav_mono16(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path)
        .map_err(|e| GraftError::DataFormat(format!("missing file {}: {e}", path.display())))?;
    parse_wav_mono16(&bytes, &path.display().to_string())
}

pub fn parse_wav_mono16(bytes: &[u8], origin: &str) -> Result<Vec<f32>> {
    let fail = |msg: &str| GraftError::DataFormat(format!("{origin}: {msg}"));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut format_ok = false;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let chunk_id = &bytes[pos..pos + 4];
        let chunk_len =
            u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + chunk_len > bytes.len() {
            return Err(fail("chunk extends past end of file"));
        }
        let body = &bytes[body_start..body_start + chunk_len];
        match chunk_id {
            b"fmt " => {
                if chunk_len < 16 {
                    return Err(fail("fmt chunk too short"));
                }
                let audio_format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if audio_format != 1 {
                    return Err(fail(&format!("audio format {audio_format} (want PCM=1)")));
                }
                if channels != 1 {
                    return Err(fail(&format!("{channels} channels (want mono)")));
                }
                if rate != WAV_SAMPLE_RATE {
                    return Err(fail(&format!("sample rate {rate} (want {WAV_SAMPLE_RATE})")));
                }
                if bits != 16 {
                    return Err(fail(&format!("{bits}-bit samples (want 16)")));
                }
                format_ok = true;
            }
            b"data" => data = Some(body),
            _ => {} // skip other chunks
        }
        // chunks are word-aligned
        pos = body_start + chunk_len + (chunk_len & 1);
    }
    if !format_ok {
        return Err(fail("missing fmt chunk"));
    }
    let data = data.ok_or_else(|| fail("missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(fail("odd data chunk length"));
    }
    Ok(data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f32 / 32768.0)
        .collect())
}

pub fn write_wav_mono16(path: &Path, samples: &[f32]) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut bytes = Vec::with_capacity(44 + data_len);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&WAV_SAMPLE_RATE.to_le_bytes());
    bytes.extend_from_slice(&(WAV_SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes()); // bits
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Sidecar label format: one line per file, `filename,id1;id2;…`,
/// producing multi-hot targets over `classes`.
pub fn load_wav_dataset(dir: &Path, labels: &Path, classes: usize) -> Result<Vec<LabeledExample>> {
    let text = std::fs::read_to_string(labels)
        .map_err(|e| GraftError::DataFormat(format!("missing file {}: {e}", labels.display())))?;
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (filename, ids) = line.split_once(',').ok_or_else(|| {
            GraftError::DataFormat(format!(
                "{}: line {}: expected \"filename,id1;id2;…\"",
                labels.display(),
                lineno + 1
            ))
        })?;
        let mut target = vec![false; classes];
        for field in ids.split(';') {
            let field = field.trim();
            if field.is_empty() {
                continue;
            }
            let id: usize = field.parse().map_err(|e| {
                GraftError::DataFormat(format!(
                    "{}: line {}: bad label id: {e}",
                    labels.display(),
                    lineno + 1
                ))
            })?;
            if id >= classes {
                return Err(GraftError::DataFormat(format!(
                    "{}: line {}: label id {id} out of range for {classes} classes",
                    labels.display(),
                    lineno + 1
                )));
            }
            target[id] = true;
        }
        let wave = read_wav_mono16(&dir.join(filename.trim()))?;
        let example = LabeledExample {
            payload: Payload::Wave(wave),
            target: LabelTarget::MultiHot(target),
        };
        example.target.validate(classes)?;
        examples.push(example);
    }
    Ok(examples)
}

// ---------------------------------------------------------------------------
// Synthetic datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// 32×32×3 images; class = brightest quadrant (TL, TR, BL, BR).
    QuadrantImages,
    /// 1600-sample 16 kHz sinusoid bursts; class = frequency band.
    ToneWaves,
    /// 75-token sequences, vocab 1024; class = planted token motif.
    MotifTokens,
}

impl std::str::FromStr for SynthKind {
    type Err = GraftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadrant-images" => Ok(SynthKind::QuadrantImages),
            "tone-waves" => Ok(SynthKind::ToneWaves),
            "motif-tokens" => Ok(SynthKind::MotifTokens),
            other => Err(GraftError::Config(format!(
                "unknown synthetic kind {other:?} (quadrant-images|tone-waves|motif-tokens)"
            ))),
        }
    }
}

impl SynthKind {
    pub fn label(&self) -> &'static str {
        match self {
            SynthKind::QuadrantImages => "quadrant-images",
            SynthKind::ToneWaves => "tone-waves",
            SynthKind::MotifTokens => "motif-tokens",
        }
    }
}

pub const SYNTH_CLASSES: usize = 4;
pub const TONE_WAVE_SAMPLES: usize = 1600; // 0.1 s at 16 kHz, 4 patches
/// Frequency bands in Hz, one per class; band edges are multiples of the
/// 10 Hz DFT bin width of a 1600-sample clip.
pub const TONE_BANDS: [(f64, f64); 4] = [
    (300.0, 600.0),
    (900.0, 1400.0),
    (2000.0, 2800.0),
    (4200.0, 5400.0),
];
/// Token positions carrying the class motif.
pub const MOTIF_POSITIONS: [usize; 5] = [9, 22, 35, 48, 61];

/// Motif token id for class `k`, slot `j`: all ids < 512, while background
/// tokens are drawn from [512, 1024), so a motif can never occur by chance.
pub fn motif_token(class: usize, slot: usize) -> u32 {
    (17 + 41 * class + 7 * slot) as u32
}

/// Deterministic synthetic examples: identical bytes for identical
/// (kind, n, seed).
pub fn make_synthetic(kind: SynthKind, n: usize, seed: u64) -> Vec<LabeledExample> {
    let stream = match kind {
        SynthKind::QuadrantImages => 0x51,
        SynthKind::ToneWaves => 0x52,
        SynthKind::MotifTokens => 0x53,
    };
    let mut rng = Rng::from_seed_stream(seed, stream);
    (0..n)
        .map(|i| {
            let class = i % SYNTH_CLASSES;
            let payload = match kind {
                SynthKind::QuadrantImages => quadrant_image(class, &mut rng),
                SynthKind::ToneWaves => tone_wave(class, &mut rng),
                SynthKind::MotifTokens => motif_sequence(class, &mut rng),
            };
            LabeledExample {
                payload,
                target: LabelTarget::Class(class),
            }
        })
        .collect()
}

fn quadrant_image(class: usize, rng: &mut Rng) -> Payload {
    let (h, w, c) = (32usize, 32usize, 3usize);
    let mut data = vec![0.0f32; h * w * c];
    for v in data.iter_mut() {
        *v = rng.range_f64(0.0, 0.35) as f32;
    }
    let (y0, x0) = match class {
        0 => (0, 0),
        1 => (0, w / 2),
        2 => (h / 2, 0),
        _ => (h / 2, w / 2),
    };
    for y in y0..y0 + h / 2 {
        for x in x0..x0 + w / 2 {
            for ch in 0..c {
                let idx = (y * w + x) * c + ch;
                data[idx] = (data[idx] + 0.45).min(1.0);
            }
        }
    }
    Payload::Image(Image::new(h, w, c, data))
}

fn tone_wave(class: usize, rng: &mut Rng) -> Payload {
    let (lo, hi) = TONE_BANDS[class];
    // quantize to the 10 Hz bin grid so the spectral peak is unambiguous
    let bin_width = WAV_SAMPLE_RATE as f64 / TONE_WAVE_SAMPLES as f64;
    let lo_bin = (lo / bin_width).ceil() as usize;
    let hi_bin = (hi / bin_width).floor() as usize;
    let bin = lo_bin + rng.below(hi_bin - lo_bin + 1);
    let freq = bin as f64 * bin_width;
    let phase = rng.range_f64(0.0, std::f64::consts::TAU);
    let samples: Vec<f32> = (0..TONE_WAVE_SAMPLES)
        .map(|t| {
            let s = 0.7
                * (std::f64::consts::TAU * freq * t as f64 / WAV_SAMPLE_RATE as f64 + phase).sin()
                + rng.normal_scaled(0.01);
            s.clamp(-1.0, 1.0) as f32
        })
        .collect();
    Payload::Wave(samples)
}

fn motif_sequence(class: usize, rng: &mut Rng) -> Payload {
    let mut ids: Vec<u32> = (0..TOKENS_PER_SECOND)
        .map(|_| 512 + rng.below(512) as u32)
        .collect();
    for (slot, &pos) in MOTIF_POSITIONS.iter().enumerate() {
        ids[pos] = motif_token(class, slot);
    }
    Payload::Tokens(ids)
}

/// Content digest of a dataset, for manifests and determinism checks.
pub fn dataset_digest(examples: &[LabeledExample]) -> String {
    let mut hasher = Sha256::new();
    for ex in examples {
        match &ex.payload {
            Payload::Image(img) => {
                hasher.update(b"img");
                hasher.update((img.height as u64).to_le_bytes());
                hasher.update((img.width as u64).to_le_bytes());
                hasher.update((img.channels as u64).to_le_bytes());
                for v in &img.data {
                    hasher.update(v.to_le_bytes());
                }
            }
            Payload::Wave(w) => {
                hasher.update(b"wav");
                for v in w {
                    hasher.update(v.to_le_bytes());
                }
            }
            Payload::Tokens(t) => {
                hasher.update(b"tok");
                for v in t {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        match &ex.target {
            LabelTarget::Class(c) => {
                hasher.update(b"cls");
                hasher.update((*c as u64).to_le_bytes());
            }
            LabelTarget::MultiHot(v) => {
                hasher.update(b"mh");
                for &b in v {
                    hasher.update([b as u8]);
                }
            }
        }
    }
    hex(&hasher.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    // ---- CIFAR ----

    #[test]
    fn well_formed_batch_yields_record_count() {
        let dir = TempDir::new().unwrap();
        let n = 100;
        let mut bytes = Vec::new();
        for i in 0..n {
            bytes.push((i % 10) as u8);
            bytes.extend(std::iter::repeat(128u8).take(3072));
        }
        let path = dir.path().join("batch.bin");
        std::fs::write(&path, &bytes).unwrap();
        let examples = load_cifar_batch(&path).unwrap();
        assert_eq!(examples.len(), n);
    }

    #[test]
    fn off_by_one_length_is_rejected() {
        let dir = TempDir::new().unwrap();
        let mut bytes = vec![0u8; CIFAR_RECORD_BYTES * 3];
        bytes.push(0);
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, &bytes).unwrap();
        let err = load_cifar_batch(&path).unwrap_err();
        assert!(matches!(err, GraftError::DataFormat(_)));
    }

    #[test]
    fn hand_built_record_round_trips_exactly() {
        // label 7, all pixels 255 → image of 1.0s, label 7
        let mut record = vec![7u8];
        record.extend(std::iter::repeat(255u8).take(3072));
        let examples = parse_cifar_records(&record, "fixture").unwrap();
        assert_eq!(examples.len(), 1);
        let LabeledExample { payload, target } = &examples[0];
        assert_eq!(*target, LabelTarget::Class(7));
        let Payload::Image(img) = payload else { panic!() };
        assert!(img.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn missing_cifar_file_is_a_data_error() {
        let dir = TempDir::new().unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(matches!(err, GraftError::DataFormat(_)));
    }

    // ---- IDX ----

    fn write_idx_pair(dir: &Path, images: &[[u8; 4]], labels: &[u8]) {
        let mut img_bytes = IDX_IMAGE_MAGIC.to_be_bytes().to_vec();
        img_bytes.extend((images.len() as u32).to_be_bytes());
        img_bytes.extend(2u32.to_be_bytes());
        img_bytes.extend(2u32.to_be_bytes());
        for img in images {
            img_bytes.extend_from_slice(img);
        }
        std::fs::write(dir.join("train-images-idx3-ubyte"), img_bytes).unwrap();
        let mut lbl_bytes = IDX_LABEL_MAGIC.to_be_bytes().to_vec();
        lbl_bytes.extend((labels.len() as u32).to_be_bytes());
        lbl_bytes.extend_from_slice(labels);
        std::fs::write(dir.join("train-labels-idx1-ubyte"), lbl_bytes).unwrap();
    }

    #[test]
    fn idx_fixture_round_trips_pixels_and_labels() {
        let dir = TempDir::new().unwrap();
        write_idx_pair(dir.path(), &[[0, 51, 102, 255], [255, 204, 153, 0]], &[3, 9]);
        let images = load_idx_images(&dir.path().join("train-images-idx3-ubyte")).unwrap();
        let labels = load_idx_labels(&dir.path().join("train-labels-idx1-ubyte")).unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].data[1], 51.0 / 255.0);
        assert_eq!(images[1].data[3], 0.0);
        let examples = zip_idx(images, labels, 10).unwrap();
        assert_eq!(examples[1].target, LabelTarget::Class(9));
    }

    #[test]
    fn wrong_label_magic_is_rejected() {
        let dir = TempDir::new().unwrap();
        let mut bytes = 0x0000_0802u32.to_be_bytes().to_vec();
        bytes.extend(0u32.to_be_bytes());
        let path = dir.path().join("labels");
        std::fs::write(&path, bytes).unwrap();
        let err = load_idx_labels(&path).unwrap_err();
        assert!(err.to_string().contains("bad label magic"));
    }

    #[test]
    fn image_label_count_mismatch_is_rejected() {
        let dir = TempDir::new().unwrap();
        write_idx_pair(dir.path(), &[[1, 2, 3, 4]], &[0, 1]);
        let images = load_idx_images(&dir.path().join("train-images-idx3-ubyte")).unwrap();
        let labels = load_idx_labels(&dir.path().join("train-labels-idx1-ubyte")).unwrap();
        let err = zip_idx(images, labels, 10).unwrap_err();
        assert!(err.to_string().contains("1 images vs 2 labels"));
    }

    // ---- tokens ----

    #[test]
    fn token_line_parses_label_and_ids() {
        let ids: Vec<String> = (0..75).map(|i| i.to_string()).collect();
        let line = format!("3 {}\n", ids.join(" "));
        let examples = parse_token_lines(&line, 75, 1024, 10).unwrap();
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].target, LabelTarget::Class(3));
        let Payload::Tokens(t) = &examples[0].payload else { panic!() };
        assert_eq!(t.len(), 75);
    }

    #[test]
    fn short_token_line_is_rejected() {
        let ids: Vec<String> = (0..74).map(|i| i.to_string()).collect();
        let line = format!("3 {}\n", ids.join(" "));
        let err = parse_token_lines(&line, 75, 1024, 10).unwrap_err();
        assert!(err.to_string().contains("74 token ids"));
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let mut ids: Vec<String> = (0..75).map(|i| i.to_string()).collect();
        ids[10] = "1024".into();
        let line = format!("0 {}\n", ids.join(" "));
        let err = parse_token_lines(&line, 75, 1024, 10).unwrap_err();
        assert!(matches!(err, GraftError::TokenOutOfRange { id: 1024, vocab: 1024 }));
    }

    #[test]
    fn token_file_round_trip() {
        let dir = TempDir::new().unwrap();
        let examples = make_synthetic(SynthKind::MotifTokens, 8, 5);
        let path = dir.path().join("tokens.txt");
        write_token_file(&path, &examples).unwrap();
        let loaded = load_token_file(&path, 75, 1024, 4).unwrap();
        assert_eq!(loaded, examples);
    }

    // ---- WAV ----

    #[test]
    fn wav_round_trip_and_malformations() {
        let dir = TempDir::new().unwrap();
        let samples: Vec<f32> = (0..800).map(|i| ((i as f32) * 0.01).sin() * 0.5).collect();
        let path = dir.path().join("a.wav");
        write_wav_mono16(&path, &samples).unwrap();
        let loaded = read_wav_mono16(&path).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in loaded.iter().zip(samples.iter()) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }

        // stereo rejected
        let bytes = std::fs::read(&path).unwrap();
        let mut stereo = bytes.clone();
        stereo[22] = 2;
        let err = parse_wav_mono16(&stereo, "stereo").unwrap_err();
        assert!(err.to_string().contains("channels"));

        // wrong rate rejected
        let mut wrong_rate = bytes.clone();
        wrong_rate[24..28].copy_from_slice(&44_100u32.to_le_bytes());
        let err = parse_wav_mono16(&wrong_rate, "rate").unwrap_err();
        assert!(err.to_string().contains("sample rate"));

        // non-PCM rejected
        let mut float_fmt = bytes.clone();
        float_fmt[20] = 3;
        let err = parse_wav_mono16(&float_fmt, "fmt").unwrap_err();
        assert!(err.to_string().contains("audio format"));

        // not RIFF
        let err = parse_wav_mono16(b"notariff", "junk").unwrap_err();
        assert!(err.to_string().contains("RIFF"));
    }

    #[test]
    fn wav_sidecar_builds_multihot_targets() {
        let dir = TempDir::new().unwrap();
        let samples = vec![0.1f32; 400];
        write_wav_mono16(&dir.path().join("x.wav"), &samples).unwrap();
        write_wav_mono16(&dir.path().join("y.wav"), &samples).unwrap();
        let labels = dir.path().join("labels.csv");
        std::fs::write(&labels, "x.wav,0;2\ny.wav,3\n").unwrap();
        let examples = load_wav_dataset(dir.path(), &labels, 4).unwrap();
        assert_eq!(examples.len(), 2);
        assert_eq!(
            examples[0].target,
            LabelTarget::MultiHot(vec![true, false, true, false])
        );

        std::fs::write(&labels, "x.wav,9\n").unwrap();
        let err = load_wav_dataset(dir.path(), &labels, 4).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    // ---- synthetic ----

    #[test]
    fn synthetic_generation_is_deterministic() {
        for kind in [SynthKind::QuadrantImages, SynthKind::ToneWaves, SynthKind::MotifTokens] {
            let a = make_synthetic(kind, 8, 42);
            let b = make_synthetic(kind, 8, 42);
            assert_eq!(dataset_digest(&a), dataset_digest(&b));
            let c = make_synthetic(kind, 8, 43);
            assert_ne!(dataset_digest(&a), dataset_digest(&c));
        }
    }

    #[test]
    fn quadrant_class_is_the_brightest_quadrant() {
        for ex in make_synthetic(SynthKind::QuadrantImages, 16, 9) {
            let Payload::Image(img) = &ex.payload else { panic!() };
            let LabelTarget::Class(label) = ex.target else { panic!() };
            let mut sums = [0.0f64; 4];
            for y in 0..32 {
                for x in 0..32 {
                    for c in 0..3 {
                        let q = (y / 16) * 2 + x / 16;
                        sums[q] += img.at(y, x, c) as f64;
                    }
                }
            }
            let brightest = (0..4).max_by(|&a, &b| sums[a].total_cmp(&sums[b])).unwrap();
            assert_eq!(brightest, label);
        }
    }

    #[test]
    fn tone_spectral_peak_lies_in_the_class_band() {
        // naive DFT over the real signal; peak bin must fall in the band
        for ex in make_synthetic(SynthKind::ToneWaves, 8, 11) {
            let Payload::Wave(w) = &ex.payload else { panic!() };
            let LabelTarget::Class(label) = ex.target else { panic!() };
            let n = w.len();
            let mut best = (0usize, 0.0f64);
            for k in 1..n / 2 {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for (t, &s) in w.iter().enumerate() {
                    let angle = std::f64::consts::TAU * k as f64 * t as f64 / n as f64;
                    re += s as f64 * angle.cos();
                    im -= s as f64 * angle.sin();
                }
                let mag = re * re + im * im;
                if mag > best.1 {
                    best = (k, mag);
                }
            }
            let freq = best.0 as f64 * WAV_SAMPLE_RATE as f64 / n as f64;
            let (lo, hi) = TONE_BANDS[label];
            assert!(
                (lo..=hi).contains(&freq),
                "class {label}: peak at {freq} Hz outside [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn motif_is_planted_at_documented_positions() {
        for ex in make_synthetic(SynthKind::MotifTokens, 12, 3) {
            let Payload::Tokens(ids) = &ex.payload else { panic!() };
            let LabelTarget::Class(label) = ex.target else { panic!() };
            for (slot, &pos) in MOTIF_POSITIONS.iter().enumerate() {
                assert_eq!(ids[pos], motif_token(label, slot));
            }
            // background can never collide with motif ids
            for (i, &id) in ids.iter().enumerate() {
                if !MOTIF_POSITIONS.contains(&i) {
                    assert!(id >= 512);
                }
            }
        }
    }

    #[test]
    fn payload_ranges_are_bounded() {
        for ex in make_synthetic(SynthKind::QuadrantImages, 8, 1) {
            let Payload::Image(img) = &ex.payload else { panic!() };
            assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        for ex in make_synthetic(SynthKind::ToneWaves, 8, 1) {
            let Payload::Wave(w) = &ex.payload else { panic!() };
            assert!(w.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }
}
