//! Dense image-like event representations and the image utilities shared
//! by the tracker (cropping, resizing, PNM I/O).

use crate::error::{Error, Result};
use crate::event_io::{EventWindow, Polarity};
use crate::voxel::Region;

/// Row-major image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(w: usize, h: usize, channels: usize) -> Self {
        Self {
            w,
            h,
            channels,
            data: vec![0.0; w * h * channels],
        }
    }

    pub fn from_data(w: usize, h: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != w * h * channels {
            return Err(Error::Shape(format!(
                "image {w}x{h}x{channels} needs {} values, got {}",
                w * h * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image data ({v})")));
        }
        Ok(Self {
            w,
            h,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.w + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    /// Replicates a single-channel image into three channels.
    pub fn to_rgb(&self) -> Image {
        match self.channels {
            3 => self.clone(),
            1 => Image {
                w: self.w,
                h: self.h,
                channels: 3,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            },
            c => {
                let mut out = Image::zeros(self.w, self.h, 3);
                for (dst, src) in out.data.chunks_exact_mut(3).zip(self.data.chunks_exact(c)) {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *s;
                    }
                }
                out
            }
        }
    }

    /// Encodes as binary PGM (1 channel) or PPM (2 or 3 channels). Values are
    /// multiplied by `scale`, rounded and clamped to 0..=255. A 2-channel image
    /// is written with channel 0 in red and channel 1 in blue.
    pub fn to_pnm(&self, scale: f64) -> Vec<u8> {
        let q = |v: f64| (v * scale).round().clamp(0.0, 255.0) as u8;
        let (magic, out_ch) = if self.channels == 1 {
            ("P5", 1)
        } else {
            ("P6", 3)
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.reserve(self.w * self.h * out_ch);
        for px in self.data.chunks_exact(self.channels) {
            match self.channels {
                1 => out.push(q(px[0])),
                2 => out.extend_from_slice(&[q(px[0]), 0, q(px[1])]),
                _ => out.extend_from_slice(&[q(px[0]), q(px[1]), q(px[2])]),
            }
        }
        out
    }

    /// Decodes binary PGM (P5) or PPM (P6) with maxval 255.
    pub fn from_pnm(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0usize;
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
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
                return Err(Error::ParseAt {
                    offset: pos,
                    msg: "truncated PNM header".into(),
                });
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let channels = match tokens[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            m => {
                return Err(Error::ParseAt {
                    offset: 0,
                    msg: format!("unsupported PNM magic '{m}'"),
                })
            }
        };
        let num = |i: usize| {
            tokens[i].parse::<usize>().map_err(|_| Error::ParseAt {
                offset: 0,
                msg: format!("bad PNM header field '{}'", tokens[i]),
            })
        };
        let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
        if maxval != 255 {
            return Err(Error::ParseAt {
                offset: 0,
                msg: format!("only maxval 255 supported, found {maxval}"),
            });
        }
        let n = w * h * channels;
        let payload = bytes.get(pos..pos + n).ok_or_else(|| Error::ParseAt {
            offset: bytes.len(),
            msg: format!("truncated PNM payload, need {n} bytes"),
        })?;
        Ok(Image {
            w,
            h,
            channels,
            data: payload.iter().map(|&b| f64::from(b)).collect(),
        })
    }
}

/// Per-pixel polarity-split event counts, before any scaling: `(positive, negative)`.
pub fn event_counts(window: &EventWindow, w: usize, h: usize) -> (Vec<u32>, Vec<u32>) {
    let mut pos = vec![0u32; w * h];
    let mut neg = vec![0u32; w * h];
    for e in &window.events {
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= w || y >= h {
            continue;
        }
        match e.p {
            Polarity::Positive => pos[y * w + x] += 1,
            Polarity::Negative => neg[y * w + x] += 1,
        }
    }
    (pos, neg)
}

/// Stacks a window into a 3-channel event frame: positive counts in channel 0,
/// negative counts in channel 2, scaled so the busiest pixel reaches 255.
pub fn render_event_frame(window: &EventWindow, w: usize, h: usize) -> Image {
    let (pos, neg) = event_counts(window, w, h);
    let c_max = pos.iter().chain(&neg).copied().max().unwrap_or(0).max(1);
    let scale = 255.0 / f64::from(c_max);
    let mut img = Image::zeros(w, h, 3);
    for (i, px) in img.data.chunks_exact_mut(3).enumerate() {
        px[0] = (f64::from(pos[i]) * scale).clamp(0.0, 255.0);
        px[2] = (f64::from(neg[i]) * scale).clamp(0.0, 255.0);
    }
    img
}

/// Exponentially decaying time surface, one channel per polarity
/// (0 = positive, 1 = negative).
pub fn render_time_surface(
    window: &EventWindow,
    w: usize,
    h: usize,
    decay_tau: f64,
) -> Result<Image> {
    if !(decay_tau > 0.0 && decay_tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "time-surface decay must be positive, got {decay_tau}"
        )));
    }
    let mut last: Vec<Option<u64>> = vec![None; w * h * 2];
    for e in &window.events {
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= w || y >= h {
            continue;
        }
        let c = match e.p {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        };
        let slot = &mut last[(y * w + x) * 2 + c];
        *slot = Some(slot.map_or(e.t, |t| t.max(e.t)));
    }
    let t_end = window.t_end as f64;
    let data = last
        .into_iter()
        .map(|t| t.map_or(0.0, |t| (-(t_end - t as f64).max(0.0) / decay_tau).exp()))
        .collect();
    Ok(Image {
        w,
        h,
        channels: 2,
        data,
    })
}

/// Default time-surface decay: half the window duration.
pub fn default_decay_tau(window: &EventWindow) -> f64 {
    (window.duration() as f64 / 2.0).max(1.0)
}

pub const EARLY_FUSION_EVENT_WEIGHT: f64 = 0.2;

/// Blends an event frame into a color frame at 0.2:1, renormalized by 1.2.
pub fn blend_early_fusion(color: &Image, event_frame: &Image) -> Result<Image> {
    if color.channels != 3 || event_frame.channels != 3 {
        return Err(Error::Shape(
            "early fusion needs two 3-channel images".into(),
        ));
    }
    if (color.w, color.h) != (event_frame.w, event_frame.h) {
        return Err(Error::Shape(format!(
            "early fusion size mismatch: {}x{} vs {}x{}",
            color.w, color.h, event_frame.w, event_frame.h
        )));
    }
    let norm = 1.0 + EARLY_FUSION_EVENT_WEIGHT;
    let data = color
        .data
        .iter()
        .zip(&event_frame.data)
        .map(|(&c, &e)| ((EARLY_FUSION_EVENT_WEIGHT * e + c) / norm).clamp(0.0, 255.0))
        .collect();
    Ok(Image {
        w: color.w,
        h: color.h,
        channels: 3,
        data,
    })
}

/// Crops `region` out of `img` and resamples it to `out_w x out_h` with
/// bilinear interpolation. Samples outside the image read as zero.
pub fn crop_resize(img: &Image, region: &Region, out_w: usize, out_h: usize) -> Image {
    let (left, top) = region.top_left();
    let sx = region.side_w / out_w as f64;
    let sy = region.side_h / out_h as f64;
    let mut out = Image::zeros(out_w, out_h, img.channels);
    let fetch = |x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= img.w as i64 || y >= img.h as i64 {
            0.0
        } else {
            img.get(x as usize, y as usize, c)
        }
    };
    for v in 0..out_h {
        let fy = top + (v as f64 + 0.5) * sy - 0.5;
        let y0 = fy.floor();
        let ay = fy - y0;
        for u in 0..out_w {
            let fx = left + (u as f64 + 0.5) * sx - 0.5;
            let x0 = fx.floor();
            let ax = fx - x0;
            let (xi, yi) = (x0 as i64, y0 as i64);
            for c in 0..img.channels {
                let v00 = fetch(xi, yi, c);
                let v10 = fetch(xi + 1, yi, c);
                let v01 = fetch(xi, yi + 1, c);
                let v11 = fetch(xi + 1, yi + 1, c);
                let top_row = v00 + (v10 - v00) * ax;
                let bottom_row = v01 + (v11 - v01) * ax;
                out.set(u, v, c, top_row + (bottom_row - top_row) * ay);
            }
        }
    }
    out
}
