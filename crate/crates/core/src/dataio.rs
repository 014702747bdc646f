//! Persistence and ingestion: synthetic data, PGM images, manifests,
//! checkpoints and embedding export.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{loss_entries, parse_kv, set_loss, RunConfig};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::patching::ImageGray;
use crate::probes::LabeledEmbeddings;
use crate::rng::{Purpose, StreamRng, StreamState};
use crate::trainer::{OptState, TrainState};
use crate::tsp_loss::LossParams;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCL";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_EXTENSION: &str = "spcl";
pub const MANIFEST_HEADER: &str = "path\tlabel\tsplit";

// ---------------------------------------------------------------- synthetic

/// Generator settings. Images are a pure function of `(seed, index)` and
/// these settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub size: usize,
    pub seed: u64,
    pub noise_std: f32,
    /// Peak brightness added by the class blob.
    pub lesion_gain: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            size: 64,
            seed: 0,
            noise_std: 0.05,
            lesion_gain: BLOB_GAIN,
        }
    }
}

/// Fixed "lung fields": centre x, centre y, radius x, radius y (unit square).
const LUNGS: [(f32, f32, f32, f32); 2] = [(0.3, 0.52, 0.14, 0.3), (0.7, 0.52, 0.14, 0.3)];
const LUNG_GAIN: f32 = 0.25;
const BLOB_GAIN: f32 = 0.15;
const BLOB_JITTER: f32 = 0.06;
const BACKGROUND_STREAM: u64 = u64::MAX;

/// Label of sample `index`: classes cycle, so any prefix is near-balanced.
pub fn synthetic_label(index: usize, classes: usize) -> usize {
    index % classes
}

/// Blob centre quadrant (column, row in {0, 1}) and radius for a label.
pub fn blob_geometry(label: usize) -> ((usize, usize), f32) {
    let q = label % 4;
    let radius = 0.14 + 0.05 * (label / 4) as f32;
    ((q % 2, q / 2), radius)
}

fn smoothstep_inside(d: f32, softness: f32) -> f32 {
    // 1 inside the unit contour, 0 outside, smooth over `softness`.
    ((1.0 - d) / softness + 0.5).clamp(0.0, 1.0)
}

/// One synthetic image: smooth background + two fixed bright ellipses shared
/// by every class + one class-specific blob + Gaussian pixel noise.
pub fn synthetic_image(cfg: &SyntheticConfig, index: usize) -> Result<(ImageGray, usize)> {
    if cfg.classes < 2 || cfg.size < 4 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 classes and 4x4 pixels, got {} and {}",
            cfg.classes, cfg.size
        )));
    }
    let label = synthetic_label(index, cfg.classes);
    // The background is shared by the whole dataset; only the blob position
    // and the noise vary per image.
    let mut bg = StreamRng::new(cfg.seed, Purpose::Data, BACKGROUND_STREAM);
    let base: f32 = bg.random_range(0.15..0.25);
    let amp: f32 = bg.random_range(0.03..0.06);
    let (fx, fy): (f32, f32) = (bg.random_range(0.5..1.5), bg.random_range(0.5..1.5));
    let phase: f32 = bg.random_range(0.0..std::f32::consts::TAU);
    let mut rng = StreamRng::new(cfg.seed, Purpose::Data, index as u64);
    let ((qx, qy), radius) = blob_geometry(label);
    let cx = 0.25 + 0.5 * qx as f32 + rng.random_range(-BLOB_JITTER..BLOB_JITTER);
    let cy = 0.25 + 0.5 * qy as f32 + rng.random_range(-BLOB_JITTER..BLOB_JITTER);

    let n = cfg.size;
    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f32 + 0.5) / n as f32, (y as f32 + 0.5) / n as f32);
            let mut p = base + amp * (std::f32::consts::TAU * (fx * u + fy * v) + phase).sin();
            for &(lx, ly, rx, ry) in &LUNGS {
                let d = (((u - lx) / rx).powi(2) + ((v - ly) / ry).powi(2)).sqrt();
                p += LUNG_GAIN * smoothstep_inside(d, 0.15);
            }
            let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt() / radius;
            p += cfg.lesion_gain * smoothstep_inside(d, 0.3);
            if cfg.noise_std > 0.0 {
                let z: f32 = rng.sample(StandardNormal);
                p += cfg.noise_std * z;
            }
            pixels.push(p.clamp(0.0, 1.0));
        }
    }
    Ok((ImageGray::new(n, n, pixels)?, label))
}

/// Samples `start..start + count`.
pub fn gen_synthetic(cfg: &SyntheticConfig, start: usize, count: usize) -> Result<Vec<(ImageGray, usize)>> {
    (start..start + count).map(|i| synthetic_image(cfg, i)).collect()
}

// ---------------------------------------------------------------------- PGM

fn pgm_token<'b>(bytes: &'b [u8], pos: &mut usize, field: &'static str) -> Result<&'b [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(field, "missing"));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize, field: &'static str) -> Result<usize> {
    let tok = pgm_token(bytes, pos, field)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&v: &usize| v > 0)
        .ok_or_else(|| Error::format(field, format!("`{}` is not a positive integer", String::from_utf8_lossy(tok))))
}

/// Decodes a binary 8-bit PGM (`P5`, maxval 255) into `[0, 1]` pixels.
pub fn parse_pgm(bytes: &[u8]) -> Result<ImageGray> {
    let mut pos = 0;
    let magic = pgm_token(bytes, &mut pos, "magic")?;
    if magic != b"P5" {
        return Err(Error::format(
            "magic",
            format!("expected P5, found `{}`", String::from_utf8_lossy(magic)),
        ));
    }
    let width = pgm_number(bytes, &mut pos, "width")?;
    let height = pgm_number(bytes, &mut pos, "height")?;
    let maxval = pgm_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::format("maxval", format!("only 255 is supported, found {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("payload", "truncated header"));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .ok_or_else(|| Error::format("width", "image too large"))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::format(
            "payload",
            format!("truncated: {} of {need} bytes", payload.len()),
        ));
    }
    let pixels = payload[..need].iter().map(|&b| f32::from(b) / 255.0).collect();
    ImageGray::new(height, width, pixels)
}

pub fn load_pgm(path: &Path) -> Result<ImageGray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|e| match e {
        Error::Format { field, detail } => Error::Format {
            field,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn encode_pgm(img: &ImageGray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&p| (p * 255.0).round() as u8));
    out
}

pub fn save_pgm(path: &Path, img: &ImageGray) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

// ----------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub label: usize,
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == MANIFEST_HEADER => {}
            other => {
                return Err(Error::format(
                    "manifest header",
                    format!("expected `{MANIFEST_HEADER}`, found `{}`", other.unwrap_or("")),
                ))
            }
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 || cols.len() > 3 || cols[0].is_empty() {
                return Err(Error::format("manifest row", format!("line {}: `{line}`", n + 2)));
            }
            let label = cols[1]
                .trim()
                .parse()
                .map_err(|_| Error::format("label", format!("line {}: `{}`", n + 2, cols[1])))?;
            if !seen.insert(cols[0].to_string()) {
                return Err(Error::format("path", format!("line {}: duplicate `{}`", n + 2, cols[0])));
            }
            let split = cols.get(2).map(|s| s.trim()).filter(|s| !s.is_empty()).map(str::to_string);
            records.push(ManifestRecord {
                path: cols[0].to_string(),
                label,
                split,
            });
        }
        Ok(Manifest { records })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\n", r.path, r.label, r.split.as_deref().unwrap_or("")));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Records whose split tag equals `split` (all records when `None`).
    pub fn select(&self, split: Option<&str>) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| split.is_none() || r.split.as_deref() == split)
            .collect()
    }
}

/// Loads the images of a manifest (paths relative to the manifest file).
pub fn load_dataset(manifest_path: &Path, split: Option<&str>) -> Result<Vec<(ImageGray, usize)>> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest
        .select(split)
        .into_iter()
        .map(|r| Ok((load_pgm(&root.join(&r.path))?, r.label)))
        .collect()
}

/// Writes `train` and `test` synthetic splits as PGM files plus a manifest.
pub fn write_synthetic_dataset(dir: &Path, cfg: &SyntheticConfig, train: usize, test: usize) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = Manifest::default();
    for i in 0..train + test {
        let (img, label) = synthetic_image(cfg, i)?;
        let rel = format!("images/{i:05}.pgm");
        save_pgm(&dir.join(&rel), &img)?;
        let split = if i < train { "train" } else { "test" };
        manifest.records.push(ManifestRecord {
            path: rel,
            label,
            split: Some(split.to_string()),
        });
    }
    let path = dir.join("manifest.tsv");
    manifest.save(&path)?;
    Ok(path)
}

// --------------------------------------------------------------- checkpoint

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.bytes(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        self.u64(data.len() as u64);
        let payload: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.u32(crc32fast::hash(&payload));
        self.0.extend_from_slice(&payload);
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(field, format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self, field: &'static str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let b = self.take(n, field)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(field, "not UTF-8"))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string("tensor name")?;
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(Error::Integrity(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64("tensor shape")?).map_err(|_| Error::Integrity(name.clone()))?);
        }
        let count = self.u64("tensor length")?;
        let expected = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if expected != Some(count) {
            return Err(Error::Integrity(format!("{name}: shape {shape:?} does not hold {count} values")));
        }
        let crc = self.u32("tensor checksum")?;
        let bytes = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Integrity(format!("{name}: length overflow")))?;
        let payload = self.take(bytes, "tensor payload")?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::Integrity(format!("{name}: payload checksum mismatch")));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Integrity(format!("{name}: {e}")))?;
        Ok((name, tensor))
    }
}

/// Serializes a training state; the encoding is canonical, so equal states
/// produce identical bytes.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let run = RunConfig {
        encoder: state.encoder.clone(),
        train: state.train.clone(),
    };
    let mut text = run.to_text();
    for (k, v) in loss_entries(&state.loss) {
        text.push_str(&format!("{k} = {v}\n"));
    }
    w.bytes(text.as_bytes());

    let names = state.params.names();
    let tensors = state.params.tensors();
    w.u32((3 * (tensors.len() + 1)) as u32);
    for (n, t) in names.iter().zip(tensors) {
        w.tensor(n, t.shape(), t.data());
    }
    w.tensor("loss.theta_tau", &[], state.loss.theta_tau.data());
    let all_shapes: Vec<(&str, &[usize])> = names
        .iter()
        .map(String::as_str)
        .zip(tensors.iter().map(Tensor::shape))
        .chain([("loss.theta_tau", &[][..])])
        .collect();
    for (prefix, buffers) in [("opt.m.", &state.opt.m), ("opt.v.", &state.opt.v)] {
        for ((n, shape), buf) in all_shapes.iter().zip(buffers) {
            w.tensor(&format!("{prefix}{n}"), shape, buf);
        }
    }
    w.u64(state.opt.step);
    let rng = [state.partition_rng];
    w.u32(rng.len() as u32);
    for s in rng {
        w.u64(s.seed);
        w.u32(s.purpose as u32);
        w.u64(s.substream);
        w.u64(s.position);
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", "not an S-PCL checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let text = r.string("config")?;
    let mut run = RunConfig::default();
    let mut loss = LossParams::default();
    for (k, v) in parse_kv(&text)? {
        if k.starts_with("loss.") {
            set_loss(&mut loss, &k, &v)?;
        } else {
            run.set(&k, &v)?;
        }
    }
    run.encoder.validate()?;
    run.train.validate()?;

    let count = r.u32("tensor count")? as usize;
    let layout = run.encoder.layout();
    if count != 3 * (layout.len() + 1) {
        return Err(Error::Integrity(format!(
            "expected {} tensors for this encoder, found {count}",
            3 * (layout.len() + 1)
        )));
    }
    let mut named = Vec::with_capacity(layout.len());
    for _ in 0..layout.len() {
        named.push(r.tensor()?);
    }
    let params = EncoderParams::from_named(&run.encoder, named)?;
    let (name, theta) = r.tensor()?;
    if name != "loss.theta_tau" || !theta.is_scalar() {
        return Err(Error::Integrity(format!("expected scalar loss.theta_tau, found {name}")));
    }
    loss.theta_tau = theta;
    loss.validate()?;

    let expected: Vec<(String, Vec<usize>)> = layout
        .into_iter()
        .chain([("loss.theta_tau".to_string(), vec![])])
        .collect();
    let mut buffers = [Vec::new(), Vec::new()];
    for (prefix, out) in ["opt.m.", "opt.v."].iter().zip(buffers.iter_mut()) {
        for (n, shape) in &expected {
            let (name, t) = r.tensor()?;
            if name != format!("{prefix}{n}") || t.shape() != shape.as_slice() {
                return Err(Error::Integrity(format!("optimizer tensor {name} does not match {prefix}{n}")));
            }
            out.push(t.into_data());
        }
    }
    let [m, v] = buffers;
    let step = r.u64("step")?;
    let rng_count = r.u32("rng count")?;
    if rng_count != 1 {
        return Err(Error::Integrity(format!("expected 1 random stream, found {rng_count}")));
    }
    let seed = r.u64("rng seed")?;
    let purpose = Purpose::from_u32(r.u32("rng purpose")?).ok_or_else(|| Error::format("rng purpose", "unknown"))?;
    let partition_rng = StreamState {
        seed,
        purpose,
        substream: r.u64("rng substream")?,
        position: r.u64("rng position")?,
    };
    if r.pos != bytes.len() {
        return Err(Error::format("trailer", format!("{} unexpected bytes", bytes.len() - r.pos)));
    }
    Ok(TrainState {
        encoder: run.encoder,
        train: run.train,
        params,
        loss,
        opt: OptState { m, v, step },
        partition_rng,
    })
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let tmp = path.with_extension(format!("{CHECKPOINT_EXTENSION}.tmp{}", std::process::id()));
    fs::write(&tmp, encode_checkpoint(state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

// --------------------------------------------------------------- embeddings

pub fn format_embeddings(emb: &LabeledEmbeddings) -> String {
    let d = emb.dim();
    let mut out = String::from("label");
    for j in 0..d {
        out.push_str(&format!("\td{j}"));
    }
    out.push('\n');
    for i in 0..emb.len() {
        out.push_str(&emb.labels()[i].to_string());
        for v in emb.embeddings().row(i) {
            out.push_str(&format!("\t{v:.8e}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings(text: &str) -> Result<LabeledEmbeddings> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format("embedding header", "empty file"))?;
    let cols: Vec<&str> = header.split('\t').collect();
    let dim = cols.len() - 1;
    let header_ok = cols[0] == "label" && dim > 0 && cols[1..].iter().enumerate().all(|(j, c)| *c == format!("d{j}"));
    if !header_ok {
        return Err(Error::format("embedding header", format!("`{header}`")));
    }
    let (mut labels, mut values) = (Vec::new(), Vec::new());
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != dim + 1 {
            return Err(Error::format("embedding row", format!("line {}: {} columns", n + 2, cols.len())));
        }
        labels.push(
            cols[0]
                .parse()
                .map_err(|_| Error::format("label", format!("line {}: `{}`", n + 2, cols[0])))?,
        );
        for c in &cols[1..] {
            let v: f32 = c
                .parse()
                .map_err(|_| Error::format("embedding value", format!("line {}: `{c}`", n + 2)))?;
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::format("embedding rows", "no rows"));
    }
    LabeledEmbeddings::new(Tensor::new(&[labels.len(), dim], values)?, labels)
}

pub fn export_embeddings(emb: &LabeledEmbeddings, path: &Path) -> Result<()> {
    if emb.is_empty() {
        return Err(Error::Config("no embeddings to export".into()));
    }
    fs::write(path, format_embeddings(emb)).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<LabeledEmbeddings> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text)
}
