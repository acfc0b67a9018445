//! Event simulation, binning, integration and event-based deblurring.
//!
//! Log intensities use a luminance floor: `ln(max(L, LUMINANCE_FLOOR))`.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const LUMINANCE_FLOOR: f64 = 1e-3;

/// Relative slack on threshold crossings so that exact multiples of the
/// threshold are not lost to rounding in `ln`.
const CROSSING_SLACK: f64 = 1e-9;

#[inline]
pub fn log_intensity(l: f64) -> f64 {
    l.max(LUMINANCE_FLOOR).ln()
}

/// Log-intensity contrast threshold of the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ContrastThreshold(f64);

impl ContrastThreshold {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid(format!(
                "contrast threshold must be > 0, got {eps}"
            )));
        }
        Ok(Self(eps))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Default for ContrastThreshold {
    fn default() -> Self {
        Self(0.2)
    }
}

impl<'de> Deserialize<'de> for ContrastThreshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        ContrastThreshold::new(f64::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Seconds.
    pub t: f64,
    pub x: u32,
    pub y: u32,
    /// +1 or -1.
    pub polarity: i8,
}

/// Signed per-pixel polarity sums over `[t_start, t_end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventBin {
    pub width: usize,
    pub height: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub counts: Vec<i32>,
}

/// Integrated polarity per pixel (continuous-valued for simulated maps).
#[derive(Debug, Clone, PartialEq)]
pub struct EventMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl EventMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub(crate) fn check_shape(&self, other: &EventMap) -> Result<()> {
        if self.width == other.width && self.height == other.height {
            Ok(())
        } else {
            Err(Error::SizeMismatch(format!(
                "event maps {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }
}

fn check_increasing(ts: &[f64], what: &str) -> Result<()> {
    for w in ts.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::NonMonotonicTime(format!(
                "{what}: {} then {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Simulates a per-pixel reference-level event sensor over a frame sequence.
///
/// Each pixel keeps a reference log intensity. Between consecutive frames it
/// emits `floor(|dL| / eps)` events of the sign of `dL` and moves its
/// reference by `eps` per event. Events of one interval are spread evenly
/// inside the open interval; the output is sorted by time, then row, then
/// column.
pub fn generate_events(
    frames: &[Image],
    timestamps: &[f64],
    eps: ContrastThreshold,
) -> Result<Vec<Event>> {
    if frames.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: frames.len(),
        });
    }
    if frames.len() != timestamps.len() {
        return Err(Error::LengthMismatch(format!(
            "{} frames, {} timestamps",
            frames.len(),
            timestamps.len()
        )));
    }
    check_increasing(timestamps, "frame timestamps")?;
    for f in &frames[1..] {
        if f.width() != frames[0].width() || f.height() != frames[0].height() {
            return Err(Error::SizeMismatch("frames differ in size".into()));
        }
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    let eps = eps.value();
    let first = frames[0].luminance();
    let mut reference: Vec<f64> = first.data().iter().map(|&l| log_intensity(l)).collect();

    let mut events = Vec::new();
    for (pair, ts) in frames.windows(2).zip(timestamps.windows(2)) {
        let (ta, tb) = (ts[0], ts[1]);
        let lum = pair[1].luminance();
        for (p, &l) in lum.data().iter().enumerate() {
            let delta = log_intensity(l) - reference[p];
            let k = (delta.abs() / eps + CROSSING_SLACK).floor() as usize;
            if k == 0 {
                continue;
            }
            let sign = delta.signum();
            for i in 0..k {
                events.push(Event {
                    t: ta + (tb - ta) * (i + 1) as f64 / (k + 1) as f64,
                    x: (p % w) as u32,
                    y: (p / w) as u32,
                    polarity: sign as i8,
                });
            }
            reference[p] += sign * k as f64 * eps;
        }
    }
    debug_assert!(events.iter().all(|e| (e.y as usize) < h));
    events.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
    Ok(events)
}

/// Sums polarities into `N - 1` half-open bins `[b_i, b_{i+1})`.
pub fn accumulate_bins(
    events: &[Event],
    boundaries: &[f64],
    width: usize,
    height: usize,
) -> Result<Vec<EventBin>> {
    if boundaries.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: boundaries.len(),
        });
    }
    check_increasing(boundaries, "bin boundaries")?;
    let mut bins: Vec<EventBin> = boundaries
        .windows(2)
        .map(|b| EventBin {
            width,
            height,
            t_start: b[0],
            t_end: b[1],
            counts: vec![0; width * height],
        })
        .collect();
    let last = boundaries[boundaries.len() - 1];
    for e in events {
        if e.t < boundaries[0] || e.t >= last {
            continue;
        }
        if e.x as usize >= width || e.y as usize >= height {
            return Err(Error::SizeMismatch(format!(
                "event at ({}, {}) outside {width}x{height}",
                e.x, e.y
            )));
        }
        // last boundary <= t
        let i = boundaries.partition_point(|&b| b <= e.t) - 1;
        bins[i].counts[e.y as usize * width + e.x as usize] += e.polarity as i32;
    }
    Ok(bins)
}

/// Prefix sums of bins: `E_i = sum_{j <= i} B_j`.
pub fn cumulative_event_maps(bins: &[EventBin]) -> Result<Vec<EventMap>> {
    let first = bins.first().ok_or(Error::Empty("event bins"))?;
    let mut acc = vec![0.0; first.counts.len()];
    let mut maps = Vec::with_capacity(bins.len());
    for b in bins {
        if b.width != first.width || b.height != first.height {
            return Err(Error::SizeMismatch("event bins differ in size".into()));
        }
        for (a, &c) in acc.iter_mut().zip(&b.counts) {
            *a += c as f64;
        }
        maps.push(EventMap {
            width: b.width,
            height: b.height,
            values: acc.clone(),
        });
    }
    Ok(maps)
}

/// Latent frames before clamping. See [`edi_deblur`].
pub fn edi_latents_unclamped(
    blur: &Image,
    maps: &[EventMap],
    eps: ContrastThreshold,
) -> Result<Vec<Image>> {
    for m in maps {
        if m.width != blur.width() || m.height != blur.height() {
            return Err(Error::SizeMismatch(format!(
                "event map {}x{} vs blur {}x{}",
                m.width,
                m.height,
                blur.width(),
                blur.height()
            )));
        }
    }
    let n = maps.len() + 1;
    let eps = eps.value();
    let ch = blur.channels();
    let mut latents = vec![Image::new(blur.width(), blur.height(), ch); n];
    let mut ratios = vec![1.0; n];
    for p in 0..blur.pixel_count() {
        for (i, m) in maps.iter().enumerate() {
            ratios[i + 1] = (eps * m.values[p]).exp();
        }
        let denom: f64 = ratios.iter().sum();
        for c in 0..ch {
            let first = n as f64 * blur.data()[p * ch + c] / denom;
            for (latent, r) in latents.iter_mut().zip(&ratios) {
                latent.data_mut()[p * ch + c] = first * r;
            }
        }
    }
    Ok(latents)
}

/// Recovers `N` sharp frames from a blurry frame and its `N - 1` cumulative
/// event maps, assuming the blur is the mean of the latent frames and each
/// latent frame is the first one scaled by `exp(eps * E_i)`.
pub fn edi_deblur(blur: &Image, maps: &[EventMap], eps: ContrastThreshold) -> Result<Vec<Image>> {
    Ok(edi_latents_unclamped(blur, maps, eps)?
        .into_iter()
        .map(Image::finalize)
        .collect())
}

/// Pixelwise mean of equally sized frames.
pub fn synthesize_blur(sharps: &[Image]) -> Result<Image> {
    let first = sharps.first().ok_or(Error::Empty("sharp frames"))?;
    let mut acc = Image::new(first.width(), first.height(), first.channels());
    for s in sharps {
        first.check_shape(s)?;
        for (a, v) in acc.data_mut().iter_mut().zip(s.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / sharps.len() as f64;
    for a in acc.data_mut() {
        *a *= inv;
    }
    Ok(acc)
}

/// Continuous event map between two renders: `(ln b - ln a) / eps` on luminance.
pub fn simulated_event_map(a: &Image, b: &Image, eps: ContrastThreshold) -> Result<EventMap> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::SizeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let la = log_luminance(a);
    let lb = log_luminance(b);
    Ok(map_from_logs(&la, &lb, a.width(), a.height(), eps))
}

pub(crate) fn log_luminance(img: &Image) -> Vec<f64> {
    (0..img.height())
        .flat_map(|y| (0..img.width()).map(move |x| (x, y)))
        .map(|(x, y)| log_intensity(img.luma_at(x, y)))
        .collect()
}

pub(crate) fn map_from_logs(
    la: &[f64],
    lb: &[f64],
    width: usize,
    height: usize,
    eps: ContrastThreshold,
) -> EventMap {
    let inv = 1.0 / eps.value();
    EventMap {
        width,
        height,
        values: la.iter().zip(lb).map(|(a, b)| (b - a) * inv).collect(),
    }
}

/// Writes `timestamp_us x y polarity` lines.
pub fn write_events(path: impl AsRef<Path>, events: &[Event]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(events.len() * 20);
    for e in events {
        let us = (e.t * 1e6).round() as i64;
        writeln!(out, "{us} {} {} {}", e.x, e.y, e.polarity).expect("write to string");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an event file; rejects malformed lines and decreasing timestamps.
pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<Event>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, detail: String| Error::Format {
        what: format!("event file {}", path.display()),
        detail: format!("line {line}: {detail}"),
    };
    let mut events = Vec::new();
    let mut last_us = i64::MIN;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad(
                i + 1,
                format!("expected 4 fields, got {}", fields.len()),
            ));
        }
        let us: i64 = fields[0]
            .parse()
            .map_err(|e| bad(i + 1, format!("timestamp: {e}")))?;
        let x: u32 = fields[1]
            .parse()
            .map_err(|e| bad(i + 1, format!("x: {e}")))?;
        let y: u32 = fields[2]
            .parse()
            .map_err(|e| bad(i + 1, format!("y: {e}")))?;
        let polarity: i8 = match fields[3] {
            "1" => 1,
            "-1" => -1,
            other => return Err(bad(i + 1, format!("polarity must be 1 or -1, got {other}"))),
        };
        if us < last_us {
            return Err(bad(
                i + 1,
                format!("timestamp {us} precedes {last_us}; events must be sorted"),
            ));
        }
        last_us = us;
        events.push(Event {
            t: us as f64 / 1e6,
            x,
            y,
            polarity,
        });
    }
    Ok(events)
}
