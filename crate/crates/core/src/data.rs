//! Deterministic synthetic video classification data.
//!
//! Classes are motion programs: a bright Gaussian blob translating in one of
//! 4 (or 8) directions over a static field of distractor ridges. Blob phase
//! is uniform on a torus, so no single frame carries label information; only
//! temporal order does. A centroid-tracking oracle recovers the direction
//! exactly in the noise-free case.

use crate::error::{AptError, Result};
use crate::numerics::{Rng, Stream};
use std::io::{Read, Write};
use std::path::Path;

const APTD_MAGIC: &[u8; 4] = b"APTD";
const APTD_VERSION: u32 = 1;

/// Raw video, frame-major layout [t][y][x][c], always f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Video {
    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Video { frames, height, width, channels, data: vec![0.0; frames * height * width * channels] }
    }

    #[inline]
    pub fn idx(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(t, y, x, c)]
    }

    /// Channel-mean intensity of one frame as a flat [y][x] slice.
    pub fn frame_gray(&self, t: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; self.height * self.width];
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = 0.0;
                for c in 0..self.channels {
                    acc += self.at(t, y, x, c) as f64;
                }
                out[y * self.width + x] = acc / self.channels as f64;
            }
        }
        out
    }
}

/// Per-frame blob displacement for a class, in pixels. Components are
/// quantized to exactly 2 px so the path wraps a 16-px torus exactly once in
/// 8 frames; even coverage keeps the temporal mean image class-independent.
pub fn class_velocity(label: usize, num_classes: usize) -> (f64, f64) {
    debug_assert!(label < num_classes);
    // Class 0 = +x ("right"), 1 = -x ("left"), 2 = +y ("down"), 3 = -y ("up").
    if num_classes == 4 {
        [(2.0, 0.0), (-2.0, 0.0), (0.0, 2.0), (0.0, -2.0)][label]
    } else {
        [
            (2.0, 0.0),
            (2.0, 2.0),
            (0.0, 2.0),
            (-2.0, 2.0),
            (-2.0, 0.0),
            (-2.0, -2.0),
            (0.0, -2.0),
            (2.0, -2.0),
        ][label]
    }
}

/// Unit direction per class, used by the centroid oracle.
pub fn class_direction(label: usize, num_classes: usize) -> (f64, f64) {
    let (vx, vy) = class_velocity(label, num_classes);
    let n = (vx * vx + vy * vy).sqrt();
    (vx / n, vy / n)
}

#[derive(Debug, Clone)]
pub struct SyntheticVideoSet {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
    pub samples: Vec<(Video, usize)>,
}

/// Toroidal delta: shortest signed displacement from b to a on a ring of
/// circumference `len`.
fn torus_delta(a: f64, b: f64, len: f64) -> f64 {
    let mut d = a - b;
    while d > len / 2.0 {
        d -= len;
    }
    while d < -len / 2.0 {
        d += len;
    }
    d
}

fn render_sample(
    rng: &mut Rng,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    label: usize,
    num_classes: usize,
    noise_sigma: f64,
) -> Video {
    let mut v = Video::zeros(frames, height, width, channels);
    let (w, h) = (width as f64, height as f64);

    // Static distractor ridges, orientation and position class-independent.
    // They dominate the temporal mean image, so time-averaged pixels carry
    // almost no label signal.
    let n_bars = 2 + rng.below(2);
    let bars: Vec<(bool, f64, f64)> = (0..n_bars)
        .map(|_| {
            let horizontal = rng.next_f64() < 0.5;
            let pos = rng.uniform(0.0, if horizontal { h } else { w });
            let amp = rng.uniform(0.45, 0.75);
            (horizontal, pos, amp)
        })
        .collect();

    // Moving blob. The start position is uniform over the even-integer
    // grid: position stays class-independent (so no single frame gives the
    // label away) and time-summed pixel statistics stay blind to the sign
    // of motion — a ±2 px step is invisible mod the 4 px patch period —
    // while every blob-carrying tubelet in a sample shows one of a small
    // family of sharp per-direction displacement templates instead of a
    // continuum of sub-pixel phases.
    let (vx, vy) = class_velocity(label, num_classes);
    let (mut cx, mut cy) = (
        2.0 * rng.below(width / 2) as f64,
        2.0 * rng.below(height / 2) as f64,
    );
    let blob_amp = rng.uniform(1.1, 1.4);
    let blob_sigma = 1.1;
    let bar_sigma = 0.75;

    for t in 0..frames {
        for y in 0..height {
            for x in 0..width {
                let mut val = 0.0f64;
                for &(horizontal, pos, amp) in &bars {
                    let d = if horizontal {
                        torus_delta(y as f64, pos, h)
                    } else {
                        torus_delta(x as f64, pos, w)
                    };
                    val += amp * (-d * d / (2.0 * bar_sigma * bar_sigma)).exp();
                }
                let bx = torus_delta(x as f64, cx, w);
                let by = torus_delta(y as f64, cy, h);
                val += blob_amp * (-(bx * bx + by * by) / (2.0 * blob_sigma * blob_sigma)).exp();
                for c in 0..channels {
                    let i = v.idx(t, y, x, c);
                    v.data[i] = val as f32;
                }
            }
        }
        if noise_sigma > 0.0 {
            for y in 0..height {
                for x in 0..width {
                    for c in 0..channels {
                        let i = v.idx(t, y, x, c);
                        v.data[i] += (noise_sigma * rng.normal()) as f32;
                    }
                }
            }
        }
        cx = (cx + vx).rem_euclid(w);
        cy = (cy + vy).rem_euclid(h);
    }
    v
}

/// Deterministic dataset generation; sample `i` depends only on
/// (seed, i), so any prefix of a larger set is stable.
pub fn generate(
    seed: u64,
    n_samples: usize,
    dims: (usize, usize, usize, usize),
    num_classes: usize,
    noise_sigma: f64,
) -> Result<SyntheticVideoSet> {
    let (frames, height, width, channels) = dims;
    if !(num_classes == 4 || num_classes == 8) {
        return Err(AptError::config(format!(
            "num_classes must be 4 or 8 motion directions, got {num_classes}"
        )));
    }
    if height < 8 || width < 8 {
        return Err(AptError::config(format!(
            "frame size {height}x{width} too small to render motion (need >= 8)"
        )));
    }
    if frames < 2 {
        return Err(AptError::config("motion classes need at least 2 frames".to_string()));
    }
    if channels == 0 {
        return Err(AptError::config("channels must be >= 1".to_string()));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = i % num_classes;
        let mut rng = Rng::seeded(seed, Stream::Data(i as u64));
        let v = render_sample(&mut rng, frames, height, width, channels, label, num_classes, noise_sigma);
        samples.push((v, label));
    }
    Ok(SyntheticVideoSet {
        seed,
        frames,
        height,
        width,
        channels,
        num_classes,
        noise_sigma,
        samples,
    })
}

impl SyntheticVideoSet {
    /// Disjoint split indices, a pure function of (seed, ratios).
    pub fn split_indices(&self, ratios: (f64, f64, f64)) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let n = self.samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Rng::seeded(self.seed, Stream::Split);
        rng.shuffle(&mut order);
        let n_train = (n as f64 * ratios.0).round() as usize;
        let n_val = (n as f64 * ratios.1).round() as usize;
        let n_train = n_train.min(n);
        let n_val = n_val.min(n - n_train);
        let train = order[..n_train].to_vec();
        let val = order[n_train..n_train + n_val].to_vec();
        let test = order[n_train + n_val..].to_vec();
        (train, val, test)
    }

    pub fn subset(&self, indices: &[usize]) -> SyntheticVideoSet {
        SyntheticVideoSet {
            seed: self.seed,
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            num_classes: self.num_classes,
            noise_sigma: self.noise_sigma,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn save_aptd(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(APTD_MAGIC);
        for v in [
            APTD_VERSION,
            self.samples.len() as u32,
            self.frames as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            self.num_classes as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for (video, _) in &self.samples {
            for &px in &video.data {
                buf.extend_from_slice(&px.to_le_bytes());
            }
        }
        for &(_, label) in &self.samples {
            buf.extend_from_slice(&(label as u32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load_aptd(path: &Path) -> Result<SyntheticVideoSet> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let take_u32 = |off: usize| -> Result<u32> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| AptError::artifact(format!("{}: truncated header", path.display())))
        };
        if bytes.get(..4) != Some(APTD_MAGIC.as_slice()) {
            return Err(AptError::artifact(format!("{}: bad APTD magic", path.display())));
        }
        let version = take_u32(4)?;
        if version != APTD_VERSION {
            return Err(AptError::artifact(format!(
                "{}: unsupported APTD version {version}",
                path.display()
            )));
        }
        let n = take_u32(8)? as usize;
        let frames = take_u32(12)? as usize;
        let height = take_u32(16)? as usize;
        let width = take_u32(20)? as usize;
        let channels = take_u32(24)? as usize;
        let num_classes = take_u32(28)? as usize;
        let pixels = frames * height * width * channels;
        let expect = 32 + n * pixels * 4 + n * 4;
        if bytes.len() != expect {
            return Err(AptError::artifact(format!(
                "{}: size {} does not match header (expected {expect})",
                path.display(),
                bytes.len()
            )));
        }
        let mut samples = Vec::with_capacity(n);
        let mut off = 32;
        let mut videos = Vec::with_capacity(n);
        for _ in 0..n {
            let mut data = Vec::with_capacity(pixels);
            for _ in 0..pixels {
                data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
                off += 4;
            }
            videos.push(Video { frames, height, width, channels, data });
        }
        for video in videos {
            let label = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            off += 4;
            if label >= num_classes {
                return Err(AptError::artifact(format!(
                    "{}: label {label} out of {num_classes} classes",
                    path.display()
                )));
            }
            samples.push((video, label));
        }
        Ok(SyntheticVideoSet {
            seed: 0,
            frames,
            height,
            width,
            channels,
            num_classes,
            noise_sigma: 0.0,
            samples,
        })
    }
}

/// Per-step blob displacement via frame differencing: the centroid of the
/// positive part of frame_{t+1} - frame_t is the new blob location, the
/// negative part the old one; their toroidal difference is the step vector.
/// Static content cancels exactly.
pub fn step_displacements(video: &Video) -> Vec<(f64, f64)> {
    let (w, h) = (video.width as f64, video.height as f64);
    let mut out = Vec::with_capacity(video.frames.saturating_sub(1));
    for t in 0..video.frames.saturating_sub(1) {
        let a = video.frame_gray(t);
        let b = video.frame_gray(t + 1);
        // Weighted circular means, computed per axis on the torus.
        let (mut pw, mut nw) = (0.0f64, 0.0f64);
        let (mut psin_x, mut pcos_x, mut psin_y, mut pcos_y) = (0.0, 0.0, 0.0, 0.0);
        let (mut nsin_x, mut ncos_x, mut nsin_y, mut ncos_y) = (0.0, 0.0, 0.0, 0.0);
        for y in 0..video.height {
            for x in 0..video.width {
                let d = b[y * video.width + x] - a[y * video.width + x];
                let ax = std::f64::consts::TAU * x as f64 / w;
                let ay = std::f64::consts::TAU * y as f64 / h;
                if d > 0.0 {
                    pw += d;
                    psin_x += d * ax.sin();
                    pcos_x += d * ax.cos();
                    psin_y += d * ay.sin();
                    pcos_y += d * ay.cos();
                } else if d < 0.0 {
                    nw -= d;
                    nsin_x -= d * ax.sin();
                    ncos_x -= d * ax.cos();
                    nsin_y -= d * ay.sin();
                    ncos_y -= d * ay.cos();
                }
            }
        }
        if pw == 0.0 || nw == 0.0 {
            out.push((0.0, 0.0));
            continue;
        }
        let to_coord = |s: f64, c: f64, len: f64| s.atan2(c).rem_euclid(std::f64::consts::TAU) * len / std::f64::consts::TAU;
        let px = to_coord(psin_x, pcos_x, w);
        let py = to_coord(psin_y, pcos_y, h);
        let nx = to_coord(nsin_x, ncos_x, w);
        let ny = to_coord(nsin_y, ncos_y, h);
        out.push((torus_delta(px, nx, w), torus_delta(py, ny, h)));
    }
    out
}

/// Unwrapped blob track: cumulative sum of step displacements from (0, 0).
/// For a rightward class the x coordinates are strictly increasing.
pub fn motion_track(video: &Video) -> Vec<(f64, f64)> {
    let mut track = vec![(0.0, 0.0)];
    for (dx, dy) in step_displacements(video) {
        let &(x, y) = track.last().unwrap();
        track.push((x + dx, y + dy));
    }
    track
}

/// Classify by matching the mean displacement direction against the class
/// direction table. Exact for noise-free samples.
pub fn oracle_direction(video: &Video, num_classes: usize) -> usize {
    let steps = step_displacements(video);
    let (mut sx, mut sy) = (0.0, 0.0);
    for (dx, dy) in steps {
        sx += dx;
        sy += dy;
    }
    let norm = (sx * sx + sy * sy).sqrt().max(1e-12);
    let (ux, uy) = (sx / norm, sy / norm);
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for k in 0..num_classes {
        let (dx, dy) = class_direction(k, num_classes);
        let dot = ux * dx + uy * dy;
        if dot > best_dot {
            best_dot = dot;
            best = k;
        }
    }
    best
}

/// Multi-view evaluation geometry.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ViewSpec {
    pub temporal_clips: usize,
    pub spatial_views: usize,
}

impl Default for ViewSpec {
    fn default() -> Self {
        ViewSpec { temporal_clips: 1, spatial_views: 3 }
    }
}

impl ViewSpec {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_clips < 1 {
            return Err(AptError::config("temporal_clips must be >= 1".to_string()));
        }
        if !(self.spatial_views == 1 || self.spatial_views == 3) {
            return Err(AptError::config(format!(
                "spatial_views must be 1 or 3, got {}",
                self.spatial_views
            )));
        }
        Ok(())
    }

    pub fn total_views(&self) -> usize {
        self.temporal_clips * self.spatial_views
    }
}

/// Evenly spaced window starts covering [0, len-span], endpoints included.
fn window_starts(len: usize, span: usize, k: usize) -> Vec<usize> {
    let slack = len - span;
    if k == 1 {
        return vec![slack / 2];
    }
    (0..k)
        .map(|i| ((i as f64) * (slack as f64) / ((k - 1) as f64)).round() as usize)
        .collect()
}

fn crop(video: &Video, t0: usize, y0: usize, x0: usize, span: (usize, usize, usize)) -> Video {
    let (st, sh, sw) = span;
    let mut out = Video::zeros(st, sh, sw, video.channels);
    for t in 0..st {
        for y in 0..sh {
            for x in 0..sw {
                for c in 0..video.channels {
                    let i = out.idx(t, y, x, c);
                    out.data[i] = video.at(t0 + t, y0 + y, x0 + x, c);
                }
            }
        }
    }
    out
}

/// K evenly spaced temporal clips x 1 or 3 spatial crops (left/center/right
/// along the axis with more slack). Deterministic offsets; never reads
/// outside bounds.
pub fn make_views(video: &Video, span: (usize, usize, usize), spec: &ViewSpec) -> Result<Vec<Video>> {
    spec.validate()?;
    let (st, sh, sw) = span;
    if video.frames < st || video.height < sh || video.width < sw {
        return Err(AptError::config(format!(
            "video {}x{}x{} smaller than model span {st}x{sh}x{sw}",
            video.frames, video.height, video.width
        )));
    }
    let t_starts = window_starts(video.frames, st, spec.temporal_clips);
    let slack_y = video.height - sh;
    let slack_x = video.width - sw;
    let spatial: Vec<(usize, usize)> = if spec.spatial_views == 1 {
        vec![(slack_y / 2, slack_x / 2)]
    } else if slack_x >= slack_y {
        vec![(slack_y / 2, 0), (slack_y / 2, slack_x / 2), (slack_y / 2, slack_x)]
    } else {
        vec![(0, slack_x / 2), (slack_y / 2, slack_x / 2), (slack_y, slack_x / 2)]
    };
    let mut views = Vec::with_capacity(t_starts.len() * spatial.len());
    for &t0 in &t_starts {
        for &(y0, x0) in &spatial {
            views.push(crop(video, t0, y0, x0, span));
        }
    }
    Ok(views)
}

/// Light train-time augmentation: crop jitter of +/-1 pixel (when there is
/// room) and fresh per-pixel noise.
pub fn augment_clip(video: &Video, span: (usize, usize, usize), noise_sigma: f64, rng: &mut Rng) -> Video {
    let (st, sh, sw) = span;
    let jitter = |slack: usize, rng: &mut Rng| -> usize {
        let center = slack / 2;
        if slack == 0 {
            0
        } else {
            let lo = center.saturating_sub(1);
            let hi = (center + 1).min(slack);
            lo + rng.below(hi - lo + 1)
        }
    };
    let t0 = jitter(video.frames - st, rng);
    let y0 = jitter(video.height - sh, rng);
    let x0 = jitter(video.width - sw, rng);
    let mut out = crop(video, t0, y0, x0, span);
    if noise_sigma > 0.0 {
        for v in &mut out.data {
            *v += (noise_sigma * rng.normal()) as f32;
        }
    }
    out
}
