//! Procedural camouflage data: multi-octave value-noise textures, star-convex
//! blob masks with an anti-aliased rim, difficulty-controlled compositing,
//! bit-exact PPM/PGM codecs, dataset generation with a JSON manifest, and an
//! Otsu luminance baseline segmenter.
//!
//! Everything is a pure function of its seed: regenerating a dataset from the
//! same (base_seed, count, size, difficulty) produces byte-identical files.

use crate::error::{Error, Result};
use crate::rng::{fnv1a, stream};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const NOISE_OCTAVES: usize = 2;
const BLOB_TRIES: usize = 100;
const FG_FRACTION: (f64, f64) = (0.05, 0.6);

// ── value noise ─────────────────────────────────────────────────────────

/// Derive an independent sub-seed for a tagged channel of one sample.
fn subseed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(8 + tag.len() + 8);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(tag.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a(&bytes)
}

/// Sum of bilinearly interpolated random lattices at doubling frequencies
/// and halving amplitudes, normalized by the amplitude sum into [0,1].
/// The coarsest lattice has size >> (octaves-1) cells; octaves=1 degenerates
/// to a pure per-pixel uniform field.
pub fn value_noise(seed: u64, size: usize, octaves: usize) -> Tensor<f64> {
    assert!(octaves >= 1, "octaves must be >= 1");
    assert!(
        size >> (octaves - 1) >= 1,
        "size {size} too small for {octaves} octaves"
    );
    let mut out = vec![0.0f64; size * size];
    let mut total_amp = 0.0;
    for o in 0..octaves {
        let cells = size >> (octaves - 1 - o);
        let amp = 0.5f64.powi(o as i32);
        total_amp += amp;
        let mut rng = stream(seed, "value-noise", o as u64);
        let g = cells + 1;
        let lattice: Vec<f64> = (0..g * g).map(|_| rng.gen::<f64>()).collect();
        let scale = cells as f64 / size as f64;
        for i in 0..size {
            let fy = i as f64 * scale;
            let iy = fy.floor() as usize;
            let ty = fy - iy as f64;
            for j in 0..size {
                let fx = j as f64 * scale;
                let ix = fx.floor() as usize;
                let tx = fx - ix as f64;
                let v00 = lattice[iy * g + ix];
                let v01 = lattice[iy * g + ix + 1];
                let v10 = lattice[(iy + 1) * g + ix];
                let v11 = lattice[(iy + 1) * g + ix + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                out[i * size + j] += amp * (top + (bot - top) * ty);
            }
        }
    }
    for v in &mut out {
        *v /= total_amp;
    }
    Tensor::new(vec![size, size], out)
}

// ── blob masks ──────────────────────────────────────────────────────────

/// Rasterize the star-convex region r(φ) = r0·(1 + Σ a_h·cos(hφ + ρ_h))
/// around (cy, cx) into an anti-aliased coverage map: 1 inside, 0 outside,
/// a linear ramp across the one-pixel rim.
fn rasterize_alpha(
    size: usize,
    cy: f64,
    cx: f64,
    r0: f64,
    a: &[f64; 6],
    rho: &[f64; 6],
) -> Vec<f64> {
    let mut alpha = vec![0.0f64; size * size];
    for i in 0..size {
        let dy = (i as f64 + 0.5) - cy;
        for j in 0..size {
            let dx = (j as f64 + 0.5) - cx;
            let dist = (dx * dx + dy * dy).sqrt();
            let phi = dy.atan2(dx);
            let mut r = 1.0;
            for h in 0..6 {
                r += a[h] * ((h as f64 + 1.0) * phi + rho[h]).cos();
            }
            r *= r0;
            alpha[i * size + j] = (r - dist + 0.5).clamp(0.0, 1.0);
        }
    }
    alpha
}

fn is_single_component(mask: &[f64], h: usize, w: usize) -> bool {
    let total = mask.iter().filter(|&&v| v == 1.0).count();
    if total == 0 {
        return false;
    }
    let start = mask.iter().position(|&v| v == 1.0).unwrap();
    let mut seen = vec![false; h * w];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0usize;
    while let Some(p) = stack.pop() {
        count += 1;
        let (i, j) = (p / w, p % w);
        let mut push = |q: usize| {
            if mask[q] == 1.0 && !seen[q] {
                seen[q] = true;
                stack.push(q);
            }
        };
        if i > 0 {
            push(p - w);
        }
        if i + 1 < h {
            push(p + w);
        }
        if j > 0 {
            push(p - 1);
        }
        if j + 1 < w {
            push(p + 1);
        }
    }
    count == total
}

/// Anti-aliased blob coverage: rejection-sampled until the binary foreground
/// fraction lands in [0.05, 0.6] as a single 4-connected component.
fn blob_alpha(seed: u64, size: usize) -> Result<Vec<f64>> {
    for attempt in 0..BLOB_TRIES {
        let mut rng = stream(seed, "blob", attempt as u64);
        let s = size as f64;
        let cx = rng.gen_range(0.25 * s..0.75 * s);
        let cy = rng.gen_range(0.25 * s..0.75 * s);
        let r0 = rng.gen_range(0.14 * s..0.40 * s);
        let mut a = [0.0f64; 6];
        let mut rho = [0.0f64; 6];
        for h in 0..6 {
            let bound = 0.25 / (h as f64 + 1.0);
            a[h] = rng.gen_range(-bound..bound);
            rho[h] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        let alpha = rasterize_alpha(size, cy, cx, r0, &a, &rho);
        let mask: Vec<f64> = alpha.iter().map(|&v| f64::from(v >= 0.5)).collect();
        let frac = mask.iter().sum::<f64>() / (size * size) as f64;
        if frac >= FG_FRACTION.0 && frac <= FG_FRACTION.1 && is_single_component(&mask, size, size)
        {
            return Ok(alpha);
        }
    }
    Err(Error::Data(format!(
        "blob_mask: no acceptable mask in {BLOB_TRIES} attempts (seed {seed}, size {size})"
    )))
}

/// Binary blob mask as an [H, W] map of {0, 1}.
pub fn blob_mask(seed: u64, size: usize) -> Result<Tensor<f64>> {
    let alpha = blob_alpha(seed, size)?;
    Ok(Tensor::new(
        vec![size, size],
        alpha.iter().map(|&v| f64::from(v >= 0.5)).collect(),
    ))
}

// ── sample synthesis ────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct CamoSample {
    /// RGB image, [3, H, W], values in [0, 1].
    pub image: Tensor<f64>,
    /// Binary mask, [1, H, W].
    pub mask: Tensor<f64>,
    pub seed: u64,
    pub difficulty: f64,
}

/// Compose one sample: textured background, an independent texture inside
/// the blob blended toward a second background-process texture as difficulty
/// rises, plus a luminance offset of (1-difficulty)·0.15. At difficulty 1
/// the object is only betrayed by the anti-aliased rim seam.
pub fn synth_sample(seed: u64, size: usize, difficulty: f64) -> Result<CamoSample> {
    assert!(
        (0.0..=1.0).contains(&difficulty),
        "difficulty must be in [0,1], got {difficulty}"
    );
    let alpha = blob_alpha(seed, size)?;
    let d = difficulty;
    let lum = (1.0 - d) * 0.15;
    let mut image = vec![0.0f64; 3 * size * size];
    for ch in 0..3u64 {
        let bg = value_noise(subseed(seed, "bg", ch), size, NOISE_OCTAVES);
        let fg = value_noise(subseed(seed, "fg", ch), size, NOISE_OCTAVES);
        let bg2 = value_noise(subseed(seed, "bg2", ch), size, NOISE_OCTAVES);
        let plane = &mut image[ch as usize * size * size..(ch as usize + 1) * size * size];
        for (p, ((&a, &b), (&f, &b2))) in plane.iter_mut().zip(
            alpha
                .iter()
                .zip(bg.data())
                .zip(fg.data().iter().zip(bg2.data())),
        ) {
            let inner = ((1.0 - d) * f + d * b2 + lum).clamp(0.0, 1.0);
            *p = (a * inner + (1.0 - a) * b).clamp(0.0, 1.0);
        }
    }
    let mask: Vec<f64> = alpha.iter().map(|&v| f64::from(v >= 0.5)).collect();
    Ok(CamoSample {
        image: Tensor::new(vec![3, size, size], image),
        mask: Tensor::new(vec![1, size, size], mask),
        seed,
        difficulty,
    })
}

// ── PPM / PGM codecs ────────────────────────────────────────────────────

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PPM (P6, maxval 255) from a [3, H, W] image in [0, 1].
pub fn write_ppm(image: &Tensor<f64>) -> Vec<u8> {
    let s = image.shape();
    assert!(s.len() == 3 && s[0] == 3, "write_ppm expects [3,H,W], got {s:?}");
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                out.push(quantize(data[ch * h * w + i * w + j]));
            }
        }
    }
    out
}

/// Binary PGM (P5, maxval 255) from an [H, W] or [1, H, W] map in [0, 1].
pub fn write_pgm(map: &Tensor<f64>) -> Vec<u8> {
    let s = map.shape();
    let (h, w) = match s {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        [1, 1, h, w] => (*h, *w),
        _ => panic!("write_pgm expects an [H,W]-shaped map, got {s:?}"),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    out
}

fn parse_netpbm_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let err = |msg: String| Error::Parse(msg);
    let text_end = bytes.len().min(64);
    let head = &bytes[..text_end];
    let mut fields = Vec::new();
    let mut pos = 0usize;
    // magic line, then "<w> <h>", then "255", each newline-terminated
    while fields.len() < 4 && pos < head.len() {
        let start = pos;
        while pos < head.len() && !head[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == start {
            pos += 1;
            continue;
        }
        fields.push((start, pos));
        if fields.len() == 4 {
            break;
        }
        pos += 1;
    }
    if fields.len() < 4 {
        return Err(err(format!("{magic} header truncated")));
    }
    let field = |k: usize| std::str::from_utf8(&head[fields[k].0..fields[k].1]).unwrap_or("?");
    if field(0) != magic {
        return Err(err(format!("bad magic {:?}, expected {magic}", field(0))));
    }
    let w: usize = field(1)
        .parse()
        .map_err(|_| err(format!("{magic} width {:?} is not a number", field(1))))?;
    let h: usize = field(2)
        .parse()
        .map_err(|_| err(format!("{magic} height {:?} is not a number", field(2))))?;
    if w == 0 || h == 0 {
        return Err(err(format!("{magic} dimensions {w}x{h} are degenerate")));
    }
    if field(3) != "255" {
        return Err(err(format!("{magic} maxval {:?}, only 255 supported", field(3))));
    }
    let payload_start = fields[3].1 + 1;
    if payload_start > bytes.len() {
        return Err(err(format!("{magic} payload missing")));
    }
    Ok((h, w, &bytes[payload_start..]))
}

/// Inverse of write_ppm up to quantization: returns [3, H, W] in [0, 1].
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let (h, w, payload) = parse_netpbm_header(bytes, "P6")?;
    let need = 3 * h * w;
    if payload.len() != need {
        return Err(Error::Parse(format!(
            "P6 payload has {} bytes, expected {need}",
            payload.len()
        )));
    }
    let mut data = vec![0.0f64; need];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                data[ch * h * w + i * w + j] = payload[(i * w + j) * 3 + ch] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

/// Inverse of write_pgm up to quantization: returns [H, W] in [0, 1].
pub fn read_pgm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let (h, w, payload) = parse_netpbm_header(bytes, "P5")?;
    let need = h * w;
    if payload.len() != need {
        return Err(Error::Parse(format!(
            "P5 payload has {} bytes, expected {need}",
            payload.len()
        )));
    }
    Ok(Tensor::new(
        vec![h, w],
        payload.iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

// ── dataset generation ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub size: usize,
    pub base_seed: u64,
    pub difficulty: f64,
    pub ids: Vec<String>,
}

impl DatasetManifest {
    pub fn image_path(&self, dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("img_{id}.ppm"))
    }

    pub fn mask_path(&self, dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("gt_{id}.pgm"))
    }

    /// Read manifest.json from a dataset directory and verify every
    /// referenced file exists.
    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        for id in &m.ids {
            for p in [m.image_path(dir, id), m.mask_path(dir, id)] {
                if !p.exists() {
                    return Err(Error::Data(format!(
                        "manifest references missing file {}",
                        p.display()
                    )));
                }
            }
        }
        Ok(m)
    }
}

/// Write `count` samples (seeds base_seed + i) plus manifest.json into
/// out_dir as img_NNNNN.ppm / gt_NNNNN.pgm pairs.
pub fn generate_dataset(
    out_dir: &Path,
    count: usize,
    size: usize,
    base_seed: u64,
    difficulty: f64,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{i:05}");
        let sample = synth_sample(base_seed.wrapping_add(i as u64), size, difficulty)?;
        let img_path = out_dir.join(format!("img_{id}.ppm"));
        fs::write(&img_path, write_ppm(&sample.image)).map_err(|e| Error::io(&img_path, e))?;
        let gt_path = out_dir.join(format!("gt_{id}.pgm"));
        fs::write(&gt_path, write_pgm(&sample.mask)).map_err(|e| Error::io(&gt_path, e))?;
        ids.push(id);
    }
    let manifest = DatasetManifest {
        version: 1,
        count,
        size,
        base_seed,
        difficulty,
        ids,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

// ── luminance baseline ──────────────────────────────────────────────────

/// Thresholded-luminance segmenter: the do-nothing baseline that a
/// camouflaged dataset is supposed to defeat. Box-blurs the luminance
/// (5×5) to suppress texture, then picks a global threshold with the
/// triangle method, which tolerates small-object class imbalance far
/// better than between-class-variance maximization. Returns a binary
/// [H, W] map (foreground = brighter side).
pub fn luminance_baseline(image: &Tensor<f64>) -> Tensor<f64> {
    let s = image.shape();
    assert!(s.len() == 3 && s[0] == 3, "expects [3,H,W], got {s:?}");
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let data = image.data();
    let lum: Vec<f64> = (0..n)
        .map(|p| (data[p] + data[n + p] + data[2 * n + p]) / 3.0)
        .collect();

    let radius = 2usize;
    let mut smooth = vec![0.0f64; n];
    for i in 0..h {
        for j in 0..w {
            let (mut acc, mut cnt) = (0.0f64, 0.0f64);
            for bi in i.saturating_sub(radius)..=(i + radius).min(h - 1) {
                for bj in j.saturating_sub(radius)..=(j + radius).min(w - 1) {
                    acc += lum[bi * w + bj];
                    cnt += 1.0;
                }
            }
            smooth[i * w + j] = acc / cnt;
        }
    }

    let mut hist = [0.0f64; 256];
    for &v in &smooth {
        hist[(v * 255.0).round().clamp(0.0, 255.0) as usize] += 1.0;
    }
    // triangle method: the histogram point farthest from the chord between
    // the dominant peak and the bright end
    let peak = (0..256).max_by(|&a, &b| hist[a].total_cmp(&hist[b])).unwrap();
    let hi = (0..256).rev().find(|&k| hist[k] > 0.0).unwrap();
    let mut cut = peak;
    if hi > peak {
        let (x0, y0) = (peak as f64, hist[peak]);
        let (x1, y1) = (hi as f64, hist[hi]);
        let mut best_d = -1.0f64;
        for t in peak..=hi {
            let d = ((y1 - y0) * t as f64 - (x1 - x0) * hist[t] + x1 * y0 - y1 * x0).abs();
            if d > best_d {
                best_d = d;
                cut = t;
            }
        }
    }
    Tensor::new(
        vec![h, w],
        smooth
            .iter()
            .map(|&v| f64::from((v * 255.0).round() > cut as f64))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mean_fbeta;

    #[test]
    fn value_noise_is_deterministic_and_bounded() {
        let a = value_noise(42, 32, 3);
        let b = value_noise(42, 32, 3);
        assert_eq!(a.data(), b.data());
        let c = value_noise(43, 32, 3);
        assert_ne!(a.data(), c.data());
        for &v in a.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn value_noise_single_octave_is_pure_noise() {
        let a = value_noise(7, 16, 1);
        // per-pixel uniforms: essentially all values distinct, full spread
        let mut sorted: Vec<f64> = a.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        assert!(sorted.len() > 250);
        assert!(sorted[0] < 0.05 && *sorted.last().unwrap() > 0.95);
    }

    #[test]
    fn value_noise_octaves_smooth_the_field() {
        // multi-octave fields have smaller neighbor differences than pure noise
        let rough = value_noise(11, 64, 1);
        let smooth = value_noise(11, 64, 3);
        let tv = |t: &Tensor<f64>| {
            let d = t.data();
            (0..64 * 64 - 1).map(|p| (d[p] - d[p + 1]).abs()).sum::<f64>()
        };
        assert!(tv(&smooth) < 0.5 * tv(&rough));
    }

    #[test]
    fn zero_harmonics_give_a_disc() {
        let alpha = rasterize_alpha(32, 16.0, 16.0, 8.0, &[0.0; 6], &[0.0; 6]);
        for i in 0..32 {
            for j in 0..32 {
                let dy = (i as f64 + 0.5) - 16.0;
                let dx = (j as f64 + 0.5) - 16.0;
                let inside = (dx * dx + dy * dy).sqrt() <= 8.0;
                assert_eq!(alpha[i * 32 + j] >= 0.5, inside, "pixel {i},{j}");
            }
        }
    }

    #[test]
    fn blob_masks_respect_bounds_and_connectivity() {
        for seed in 0..50u64 {
            let m = blob_mask(seed, 64).unwrap();
            let frac = m.data().iter().sum::<f64>() / (64.0 * 64.0);
            assert!((0.05..=0.6).contains(&frac), "seed {seed}: fraction {frac}");
            assert!(is_single_component(m.data(), 64, 64), "seed {seed}");
            let again = blob_mask(seed, 64).unwrap();
            assert_eq!(m.data(), again.data());
        }
    }

    #[test]
    fn samples_are_bit_deterministic() {
        let a = synth_sample(123, 48, 0.7).unwrap();
        let b = synth_sample(123, 48, 0.7).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.mask.data(), b.mask.data());
        let c = synth_sample(124, 48, 0.7).unwrap();
        assert_ne!(a.image.data(), c.image.data());
    }

    fn mean_gap(difficulty: f64, seeds: u64) -> [f64; 3] {
        let mut inside = [0.0f64; 3];
        let mut outside = [0.0f64; 3];
        let (mut n_in, mut n_out) = (0.0f64, 0.0f64);
        for seed in 0..seeds {
            let s = synth_sample(1000 + seed, 64, difficulty).unwrap();
            let n = 64 * 64;
            for p in 0..n {
                let fg = s.mask.data()[p] == 1.0;
                for ch in 0..3 {
                    let v = s.image.data()[ch * n + p];
                    if fg {
                        inside[ch] += v;
                    } else {
                        outside[ch] += v;
                    }
                }
                if fg {
                    n_in += 1.0;
                } else {
                    n_out += 1.0;
                }
            }
        }
        [0, 1, 2].map(|ch| inside[ch] / n_in - outside[ch] / n_out)
    }

    #[test]
    fn difficulty_one_hides_the_object() {
        for gap in mean_gap(1.0, 100) {
            assert!(gap.abs() < 0.02, "channel gap {gap}");
        }
    }

    #[test]
    fn difficulty_zero_shows_the_object() {
        for gap in mean_gap(0.0, 20) {
            assert!(gap > 0.05, "channel gap {gap}");
        }
    }

    #[test]
    fn pgm_format_anchor() {
        let white = Tensor::new(vec![1, 1], vec![1.0]);
        assert_eq!(write_pgm(&white), b"P5\n1 1\n255\n\xff");
    }

    #[test]
    fn codecs_round_trip_quantized_data() {
        let img = synth_sample(5, 17, 0.3).unwrap().image;
        let bytes = write_ppm(&img);
        let back = read_ppm(&bytes).unwrap();
        assert_eq!(write_ppm(&back), bytes);
        // quantized values survive exactly
        let q = img.map(|v| (v * 255.0).round() / 255.0);
        assert_eq!(back.data(), q.data());

        let mask = synth_sample(5, 17, 0.3).unwrap().mask;
        let bytes = write_pgm(&mask);
        let back = read_pgm(&bytes).unwrap();
        assert_eq!(write_pgm(&back), bytes);
    }

    #[test]
    fn codec_errors_are_named() {
        let e = read_ppm(b"P5\n2 2\n255\nxxxx").unwrap_err().to_string();
        assert!(e.contains("magic"), "{e}");
        let mut bytes = write_pgm(&Tensor::new(vec![2, 2], vec![0.5; 4]));
        bytes.pop();
        let e = read_pgm(&bytes).unwrap_err().to_string();
        assert!(e.contains("3 bytes") && e.contains("expected 4"), "{e}");
        let e = read_pgm(b"P5\n0 2\n255\n").unwrap_err().to_string();
        assert!(e.contains("degenerate"), "{e}");
    }

    #[test]
    fn dataset_generation_is_reproducible() {
        let dir_a = std::env::temp_dir().join("canet-data-a");
        let dir_b = std::env::temp_dir().join("canet-data-b");
        for d in [&dir_a, &dir_b] {
            let _ = fs::remove_dir_all(d);
        }
        let m = generate_dataset(&dir_a, 3, 32, 99, 0.5).unwrap();
        assert_eq!(m.ids, vec!["00000", "00001", "00002"]);
        generate_dataset(&dir_b, 3, 32, 99, 0.5).unwrap();
        for id in &m.ids {
            for name in [format!("img_{id}.ppm"), format!("gt_{id}.pgm")] {
                let a = fs::read(dir_a.join(&name)).unwrap();
                let b = fs::read(dir_b.join(&name)).unwrap();
                assert_eq!(a, b, "{name}");
            }
        }
        let loaded = DatasetManifest::load(&dir_a).unwrap();
        assert_eq!(loaded, m);
        // a missing file is reported by name
        fs::remove_file(dir_a.join("gt_00001.pgm")).unwrap();
        let e = DatasetManifest::load(&dir_a).unwrap_err().to_string();
        assert!(e.contains("gt_00001.pgm"), "{e}");
        for d in [&dir_a, &dir_b] {
            let _ = fs::remove_dir_all(d);
        }
    }

    #[test]
    fn empty_dataset_writes_only_the_manifest() {
        let dir = std::env::temp_dir().join("canet-data-empty");
        let _ = fs::remove_dir_all(&dir);
        let m = generate_dataset(&dir, 0, 32, 1, 0.5).unwrap();
        assert!(m.ids.is_empty());
        let entries: Vec<_> = fs::read_dir(&dir).unwrap().collect();
        assert_eq!(entries.len(), 1);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn generation_stays_in_budget() {
        let t0 = std::time::Instant::now();
        let dir = std::env::temp_dir().join("canet-data-budget");
        let _ = fs::remove_dir_all(&dir);
        generate_dataset(&dir, 200, 64, 7, 0.8).unwrap();
        let _ = fs::remove_dir_all(&dir);
        assert!(t0.elapsed().as_secs() < 30, "took {:?}", t0.elapsed());
    }

    #[test]
    fn baseline_beats_easy_data_and_loses_on_camouflage() {
        let score = |difficulty: f64| {
            let mut total = 0.0;
            for seed in 0..50u64 {
                let s = synth_sample(2000 + seed, 64, difficulty).unwrap();
                let pred = luminance_baseline(&s.image);
                total += mean_fbeta(pred.data(), s.mask.data());
            }
            total / 50.0
        };
        let easy = score(0.0);
        assert!(easy > 0.8, "baseline F at difficulty 0: {easy}");
        let hard = score(0.9);
        assert!(hard < 0.5, "baseline F at difficulty 0.9: {hard}");
    }
}

