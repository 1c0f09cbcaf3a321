use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use super::Result;
use crate::dsp::{DspError, LogPowerSpectrogram, SAMPLE_RATE};

/// Nine evenly spaced viridis samples; intermediate values are interpolated linearly.
const VIRIDIS: [[u8; 3]; 9] = [
    [0x44, 0x01, 0x54],
    [0x47, 0x2c, 0x7a],
    [0x3b, 0x51, 0x8b],
    [0x2c, 0x71, 0x8e],
    [0x21, 0x90, 0x8d],
    [0x27, 0xad, 0x81],
    [0x5c, 0xc8, 0x63],
    [0xaa, 0xdc, 0x32],
    [0xfd, 0xe7, 0x25],
];

/// Colormap lookup for `t` in [0, 1] (clamped).
pub fn viridis(t: f64) -> [u8; 3] {
    let x = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
}

const LEFT: u32 = 44;
const BOTTOM: u32 = 22;
const TOP: u32 = 16;
const RIGHT: u32 = 18;
const SCALE: u32 = 2;
const INK: Rgb<u8> = Rgb([0, 0, 0]);
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

/// 3x5 glyphs, one row per entry, most significant of the low three bits on the left.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 2, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        'k' => [4, 5, 6, 5, 5],
        'H' => [5, 5, 7, 5, 5],
        'z' => [7, 1, 2, 4, 7],
        's' => [3, 4, 2, 1, 6],
        _ => [0; 5],
    }
}

fn text_width(s: &str) -> u32 {
    (s.chars().count() as u32 * 4).saturating_sub(1) * SCALE
}

fn draw_text(img: &mut RgbImage, s: &str, x0: u32, y0: u32) {
    for (n, c) in s.chars().enumerate() {
        let g = glyph(c);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3u32 {
                if bits & (4 >> col) == 0 {
                    continue;
                }
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        let x = x0 + (n as u32 * 4 + col) * SCALE + dx;
                        let y = y0 + row as u32 * SCALE + dy;
                        if x < img.width() && y < img.height() {
                            img.put_pixel(x, y, INK);
                        }
                    }
                }
            }
        }
    }
}

fn tick_step(span: f64, candidates: &[f64], max_ticks: f64) -> f64 {
    candidates
        .iter()
        .copied()
        .find(|&s| span / s <= max_ticks)
        .unwrap_or(*candidates.last().expect("non-empty"))
}

fn label(v: f64, step: f64) -> String {
    if step < 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.0}")
    }
}

/// Rasterize: time on x, frequency on y (low at the bottom), one pixel per
/// frame/bin, values mapped linearly over the data range.
pub fn spectrogram_image(s: &LogPowerSpectrogram) -> Result<RgbImage> {
    let (frames, bins) = s.values.dim();
    if frames == 0 || bins == 0 {
        return Err(DspError::EmptyInput.into());
    }
    let (lo, hi) = s
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let (w, h) = (frames as u32, bins as u32);
    let mut img = RgbImage::from_pixel(LEFT + w + RIGHT, TOP + h + BOTTOM, BACKGROUND);
    for ((t, k), &v) in s.values.indexed_iter() {
        let u = if span > 0.0 { (v - lo) / span } else { 0.0 };
        img.put_pixel(LEFT + t as u32, TOP + h - 1 - k as u32, Rgb(viridis(u)));
    }
    // axes just outside the data area
    for y in TOP..TOP + h + 1 {
        img.put_pixel(LEFT - 1, y, INK);
    }
    for x in LEFT - 1..LEFT + w {
        img.put_pixel(x, TOP + h, INK);
    }

    let rate = SAMPLE_RATE as f64;
    let hop = s.config.hop_length as f64;
    let duration = (frames - 1) as f64 * hop / rate;
    let ts = tick_step(duration, &[0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0, 60.0], 8.0);
    let mut n = 0;
    loop {
        let sec = n as f64 * ts;
        let x = LEFT + (sec * rate / hop).round() as u32;
        if x >= LEFT + w {
            break;
        }
        for d in 1..4 {
            img.put_pixel(x, TOP + h + d, INK);
        }
        let l = label(sec, ts);
        draw_text(&mut img, &l, x.saturating_sub(text_width(&l) / 2), TOP + h + 6);
        n += 1;
    }
    draw_text(&mut img, "s", LEFT + w + 6, TOP + h + 6);

    let bin_hz = rate / s.config.fft_size as f64;
    let top_khz = (bins - 1) as f64 * bin_hz / 1000.0;
    let fs = tick_step(top_khz, &[0.5, 1.0, 2.0, 4.0], 8.0);
    let mut n = 0;
    loop {
        let khz = n as f64 * fs;
        let k = (khz * 1000.0 / bin_hz).round() as u32;
        if k >= h {
            break;
        }
        let y = TOP + h - 1 - k;
        for d in 2..5 {
            img.put_pixel(LEFT - d, y, INK);
        }
        let l = label(khz, fs);
        draw_text(
            &mut img,
            &l,
            (LEFT - 6).saturating_sub(text_width(&l)),
            y.saturating_sub(5),
        );
        n += 1;
    }
    draw_text(&mut img, "kHz", 2, 2);
    Ok(img)
}

/// Write a PNG rendering of `s` to `out_path`.
pub fn render_spectrogram_image(s: &LogPowerSpectrogram, out_path: &Path) -> Result<()> {
    let img = spectrogram_image(s)?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    crate::write_atomic(out_path, &buf.into_inner())?;
    Ok(())
}
