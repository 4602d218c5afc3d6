//! Seeded synthetic storm events and the DUO1 binary container.
//!
//! An event is a continuous simulation of advecting anisotropic blobs (air
//! masses) plus a moving front band with a sharp cross-front edge, modulated
//! by intensity-dependent small-scale speckle. The first half of the frames
//! conditions the model, the second half is the forecast target.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{Field, SequenceField};

/// Full parameterization of one synthetic event. The seed fixes everything.
#[derive(Clone, Debug)]
pub struct EventSpec {
    pub height: usize,
    pub width: usize,
    /// Frames to simulate; must be at least twice `condition_frames`.
    pub total_frames: usize,
    /// Length of the condition window (the target window matches it).
    pub condition_frames: usize,
    /// Inclusive blob-count range.
    pub blob_count: (usize, usize),
    /// Major-axis sigma range in pixels.
    pub blob_scale: (f64, f64),
    /// Anisotropy (major/minor axis ratio) range, >= 1.
    pub blob_aspect: (f64, f64),
    /// Peak intensity range.
    pub blob_peak: (f64, f64),
    /// Per-frame amplitude multiplier range (growth/decay).
    pub blob_rate: (f64, f64),
    /// Max |component| of the shared advection velocity, px/frame.
    pub advection: f64,
    pub front_enabled: bool,
    /// Front displacement along its normal, px/frame.
    pub front_velocity: f64,
    /// Gaussian half-width of the gentle (trailing) side, px.
    pub front_width: f64,
    /// Gaussian half-width of the sharp (leading) side, px.
    pub front_edge_width: f64,
    pub front_intensity: f64,
    /// Speckle amplitude relative to local intensity.
    pub speckle_amplitude: f64,
    /// Speckle correlation length, px.
    pub speckle_corr_len: f64,
    pub seed: u64,
}

impl Default for EventSpec {
    fn default() -> Self {
        EventSpec {
            height: 32,
            width: 32,
            total_frames: 10,
            condition_frames: 5,
            blob_count: (2, 4),
            blob_scale: (3.0, 6.0),
            blob_aspect: (1.0, 2.5),
            blob_peak: (0.45, 0.8),
            blob_rate: (0.95, 1.05),
            advection: 1.0,
            front_enabled: true,
            front_velocity: 1.2,
            front_width: 4.0,
            front_edge_width: 1.4,
            front_intensity: 0.9,
            speckle_amplitude: 0.18,
            speckle_corr_len: 2.0,
            seed: 0,
        }
    }
}

impl EventSpec {
    fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::contract("event grid must be at least 4x4"));
        }
        if self.condition_frames < 1 {
            return Err(Error::contract("condition window must be >= 1 frame"));
        }
        if self.total_frames < 2 * self.condition_frames {
            return Err(Error::contract(format!(
                "total frames {} cannot cover condition + target windows of {}",
                self.total_frames,
                2 * self.condition_frames
            )));
        }
        let ranges = [
            ("blob_scale", self.blob_scale),
            ("blob_aspect", self.blob_aspect),
            ("blob_peak", self.blob_peak),
            ("blob_rate", self.blob_rate),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo <= 0.0 {
                return Err(Error::contract(format!("degenerate {name} range ({lo}, {hi})")));
            }
        }
        if self.blob_count.0 > self.blob_count.1 {
            return Err(Error::contract("degenerate blob_count range"));
        }
        if self.speckle_amplitude < 0.0 || self.speckle_corr_len <= 0.0 {
            return Err(Error::contract("speckle parameters out of range"));
        }
        Ok(())
    }
}

/// One condition/target pair cut from a single simulation. Values are
/// stored in the container's 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct EventPair {
    pub x: SequenceField<f32>,
    pub y: SequenceField<f32>,
}

struct Blob {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    // inverse covariance entries of the anisotropic footprint
    ixx: f64,
    ixy: f64,
    iyy: f64,
    peak: f64,
    rate: f64,
}

fn sample_range(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Renders a full event deterministically from its spec.
pub fn generate_event(spec: &EventSpec) -> Result<EventPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);

    // shared advection plus mild per-blob deviation
    let adv_x = rng.gen_range(-spec.advection..=spec.advection);
    let adv_y = rng.gen_range(-spec.advection..=spec.advection);

    let n_blobs = if spec.blob_count.0 == spec.blob_count.1 {
        spec.blob_count.0
    } else {
        rng.gen_range(spec.blob_count.0..=spec.blob_count.1)
    };
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| {
            let major = sample_range(&mut rng, spec.blob_scale);
            let aspect = sample_range(&mut rng, spec.blob_aspect);
            let minor = (major / aspect).max(0.8);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let (c, s) = (theta.cos(), theta.sin());
            // rotate the diagonal inverse covariance
            let (la, lb) = (1.0 / (major * major), 1.0 / (minor * minor));
            Blob {
                cx: rng.gen_range(0.2 * w as f64..0.8 * w as f64),
                cy: rng.gen_range(0.2 * h as f64..0.8 * h as f64),
                vx: adv_x + rng.gen_range(-0.3..0.3),
                vy: adv_y + rng.gen_range(-0.3..0.3),
                ixx: la * c * c + lb * s * s,
                ixy: (la - lb) * s * c,
                iyy: la * s * s + lb * c * c,
                peak: sample_range(&mut rng, spec.blob_peak),
                rate: sample_range(&mut rng, spec.blob_rate),
            }
        })
        .collect();

    // front line through a random anchor, moving along its normal
    let front_angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (nx, ny) = (front_angle.cos(), front_angle.sin());
    let front_offset0 = rng.gen_range(0.35..0.65)
        * (nx.abs() * w as f64 + ny.abs() * h as f64)
        - 0.5 * (nx * w as f64 + ny * h as f64).abs().max(0.0);
    let anchor = front_offset0 + 0.5 * (nx * w as f64 + ny * h as f64);

    let mut frames = Vec::with_capacity(spec.total_frames);
    for t in 0..spec.total_frames {
        let mut base = Field::<f64>::zeros(1, h, w);
        for b in &blobs {
            let amp = b.peak * b.rate.powi(t as i32);
            let cx = b.cx + b.vx * t as f64;
            let cy = b.cy + b.vy * t as f64;
            for y in 0..h {
                for x in 0..w {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    let q = b.ixx * dx * dx + 2.0 * b.ixy * dx * dy + b.iyy * dy * dy;
                    if q < 18.0 {
                        let v = base.get(0, y, x) + amp * (-0.5 * q).exp();
                        base.set(0, y, x, v);
                    }
                }
            }
        }
        if spec.front_enabled {
            let offset = anchor + spec.front_velocity * t as f64;
            for y in 0..h {
                for x in 0..w {
                    // signed distance to the front line along the normal
                    let d = nx * x as f64 + ny * y as f64 - offset;
                    let sigma = if d >= 0.0 {
                        spec.front_edge_width
                    } else {
                        spec.front_width
                    };
                    let v = spec.front_intensity * (-0.5 * (d / sigma) * (d / sigma)).exp();
                    if v > 1e-4 {
                        base.set(0, y, x, base.get(0, y, x) + v);
                    }
                }
            }
        }
        if spec.speckle_amplitude > 0.0 {
            let speckle = correlated_noise(h, w, spec.speckle_corr_len, &mut rng);
            for y in 0..h {
                for x in 0..w {
                    let local = base.get(0, y, x);
                    let v = local * (1.0 + spec.speckle_amplitude * speckle.get(0, y, x));
                    base.set(0, y, x, v);
                }
            }
        }
        frames.push(base.map(|v| v.clamp(0.0, 1.0)).cast::<f32>());
    }

    let s = spec.condition_frames;
    let x = SequenceField::new(frames[..s].to_vec())?;
    let y = SequenceField::new(frames[s..2 * s].to_vec())?;
    Ok(EventPair { x, y })
}

/// Unit-variance noise smoothed to the requested correlation length.
fn correlated_noise(h: usize, w: usize, corr_len: f64, rng: &mut ChaCha8Rng) -> Field<f64> {
    let mut white = Field::<f64>::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            white.set(0, y, x, v);
        }
    }
    let sigma = corr_len / 2.0;
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-0.5 * (d as f64 / sigma) * (d as f64 / sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();

    // separable blur with wraparound so the texture is stationary
    let mut tmp = Field::<f64>::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                let sx = (x as isize + i as isize - radius).rem_euclid(w as isize) as usize;
                acc += t * white.get(0, y, sx);
            }
            tmp.set(0, y, x, acc / norm);
        }
    }
    let mut out = Field::<f64>::zeros(1, h, w);
    let mut sum_sq = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                let sy = (y as isize + i as isize - radius).rem_euclid(h as isize) as usize;
                acc += t * tmp.get(0, sy, x);
            }
            acc /= norm;
            out.set(0, y, x, acc);
            sum_sq += acc * acc;
        }
    }
    let std = (sum_sq / (h * w) as f64).sqrt().max(1e-9);
    out.map(|v| v / std)
}

/// A seeded event collection with an 80/10/10 index split.
#[derive(Clone, Debug, PartialEq)]
pub struct EventDataset {
    pub events: Vec<EventPair>,
}

impl EventDataset {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn train(&self) -> &[EventPair] {
        &self.events[..self.train_end()]
    }

    pub fn val(&self) -> &[EventPair] {
        &self.events[self.train_end()..self.val_end()]
    }

    pub fn test(&self) -> &[EventPair] {
        &self.events[self.val_end()..]
    }

    fn train_end(&self) -> usize {
        self.events.len() * 8 / 10
    }

    fn val_end(&self) -> usize {
        self.events.len() * 9 / 10
    }

    pub fn condition_frames(&self) -> usize {
        self.events[0].x.len()
    }

    pub fn frame_shape(&self) -> crate::grid::FieldShape {
        self.events[0].x.frame_shape()
    }
}

/// Generates `n_events` independent events with seeds `base_seed + i`.
pub fn generate_dataset(n_events: usize, template: &EventSpec, base_seed: u64) -> Result<EventDataset> {
    if n_events == 0 {
        return Err(Error::contract("dataset needs at least one event"));
    }
    let events = (0..n_events)
        .map(|i| {
            let spec = EventSpec {
                seed: base_seed.wrapping_add(i as u64),
                ..template.clone()
            };
            generate_event(&spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EventDataset { events })
}

// ---- DUO1 container ----
//
// magic "DUO1" | version u16 | count u32 | S u16 | H u16 | W u16 |
// reserved 6 bytes | per event: X frames then Y frames, each frame H*W
// little-endian f32 row-major.

const DUO1_MAGIC: &[u8; 4] = b"DUO1";
const DUO1_VERSION: u16 = 1;
const DUO1_HEADER_LEN: u64 = 22;

pub fn write_duo1(path: &Path, dataset: &EventDataset) -> Result<()> {
    let s = dataset.condition_frames();
    let shape = dataset.frame_shape();
    let count = dataset.events.len();
    if count > u32::MAX as usize
        || s > u16::MAX as usize
        || shape.height > u16::MAX as usize
        || shape.width > u16::MAX as usize
    {
        return Err(Error::format(4, "dataset dimensions overflow the header fields"));
    }
    let mut buf: Vec<u8> =
        Vec::with_capacity(DUO1_HEADER_LEN as usize + count * 2 * s * shape.len() * 4);
    buf.extend_from_slice(DUO1_MAGIC);
    buf.extend_from_slice(&DUO1_VERSION.to_le_bytes());
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    buf.extend_from_slice(&(s as u16).to_le_bytes());
    buf.extend_from_slice(&(shape.height as u16).to_le_bytes());
    buf.extend_from_slice(&(shape.width as u16).to_le_bytes());
    buf.extend_from_slice(&[0u8; 6]);
    for pair in &dataset.events {
        if pair.x.len() != s || pair.y.len() != s || pair.x.frame_shape() != shape {
            return Err(Error::contract("dataset events must share one geometry"));
        }
        for seq in [&pair.x, &pair.y] {
            for frame in seq.frames() {
                for &v in frame.data() {
                    if !v.is_finite() {
                        return Err(Error::numeric("refusing to serialize non-finite value"));
                    }
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_duo1(path: &Path) -> Result<EventDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < DUO1_HEADER_LEN as usize {
        return Err(Error::format(bytes.len() as u64, "file shorter than the header"));
    }
    if &bytes[0..4] != DUO1_MAGIC {
        return Err(Error::format(0, "bad magic, expected DUO1"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DUO1_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let s = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let h = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
    let w = u16::from_le_bytes([bytes[14], bytes[15]]) as usize;
    if count == 0 || s == 0 || h == 0 || w == 0 {
        return Err(Error::format(6, "degenerate header dimensions"));
    }
    let frame_bytes = h * w * 4;
    let expected = DUO1_HEADER_LEN as usize + count * 2 * s * frame_bytes;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated payload: header declares {count} events ({expected} bytes), file has {}",
                bytes.len()
            ),
        ));
    }

    let mut offset = DUO1_HEADER_LEN as usize;
    let read_seq = |offset: &mut usize| -> Result<SequenceField<f32>> {
        let mut frames = Vec::with_capacity(s);
        for _ in 0..s {
            let mut data = Vec::with_capacity(h * w);
            for i in 0..h * w {
                let o = *offset + i * 4;
                let v = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
                if !v.is_finite() {
                    return Err(Error::format(o as u64, "non-finite sample"));
                }
                data.push(v);
            }
            *offset += frame_bytes;
            frames.push(Field::from_vec(1, h, w, data)?);
        }
        SequenceField::new(frames)
    };
    let mut events = Vec::with_capacity(count);
    for _ in 0..count {
        let x = read_seq(&mut offset)?;
        let y = read_seq(&mut offset)?;
        events.push(EventPair { x, y });
    }
    Ok(EventDataset { events })
}
