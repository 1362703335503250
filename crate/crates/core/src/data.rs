//! Synthetic topology-controlled dataset generation and grayscale
//! image/mask ingestion.
//!
//! Generated masks are unions of rotated ellipse blobs with circular holes
//! punched strictly inside the foreground; every sample is verified against
//! the flood-fill Betti oracle at threshold 0.5 before it is accepted.
//! Images follow a speckle surrogate: ambient + contrast·mask, pixelwise
//! ×(1 + σ·n) with Gaussian n, 3×3 box smoothing, clamp to [0,1].
//!
//! File conventions: 8-bit binary PGM (P5) or 8-bit grayscale PNG; masks
//! binarize at the 127/255 rule (normalized value ≥ 128/255 → 1). Images
//! resize bilinearly, masks by nearest neighbor, both with the half-pixel
//! center convention sx = (dx + 0.5)·(src/dst) − 0.5.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::topology::betti_numbers;
use crate::{Error, Result};

const AMBIENT: f64 = 0.25;
const SAMPLE_ATTEMPTS: usize = 50;
const PLACE_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Conditioning image, row-major, values in [0,1].
    pub image: Vec<f32>,
    /// Ground-truth mask, row-major, values exactly 0.0 or 1.0.
    pub mask: Vec<f32>,
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub size: usize,
    pub n_components: (usize, usize),
    pub n_holes: (usize, usize),
    pub noise_sigma: f64,
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 32,
            n_components: (1, 2),
            n_holes: (0, 2),
            noise_sigma: 0.15,
            contrast: 0.55,
            seed: 0,
        }
    }
}

fn validate_spec(spec: &SynthSpec) -> Result<()> {
    if spec.size < 16 {
        return Err(Error::Config(format!("size must be >= 16, got {}", spec.size)));
    }
    if spec.n_components.0 > spec.n_components.1 || spec.n_components.0 == 0 {
        return Err(Error::Config(format!(
            "n_components range ({}, {}) is empty or zero",
            spec.n_components.0, spec.n_components.1
        )));
    }
    if spec.n_holes.0 > spec.n_holes.1 {
        return Err(Error::Config(format!(
            "n_holes range ({}, {}) is empty",
            spec.n_holes.0, spec.n_holes.1
        )));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", spec.noise_sigma)));
    }
    if !(spec.contrast > 0.0 && spec.contrast <= 1.0) {
        return Err(Error::Config(format!("contrast must be in (0, 1], got {}", spec.contrast)));
    }
    Ok(())
}

fn stamp_ellipse(
    mask: &mut [f32],
    s: usize,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    value: f32,
) {
    let (sin, cos) = theta.sin_cos();
    for r in 0..s {
        for c in 0..s {
            let dx = c as f64 - cx;
            let dy = r as f64 - cy;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            if u * u + v * v <= 1.0 {
                mask[r * s + c] = value;
            }
        }
    }
}

/// Chebyshev distance from each foreground pixel to the nearest background
/// (or off-grid) pixel; used to keep punched holes away from the exterior.
fn depth_map(mask: &[f32], s: usize) -> Vec<usize> {
    let mut d = vec![0usize; s * s];
    let idx = |r: usize, c: usize| r * s + c;
    for r in 0..s {
        for c in 0..s {
            if mask[idx(r, c)] == 0.0 {
                continue;
            }
            let mut best = (r + 1).min(c + 1).min(s - r).min(s - c);
            if r > 0 && c > 0 {
                best = best.min(d[idx(r - 1, c - 1)] + 1);
            }
            if r > 0 {
                best = best.min(d[idx(r - 1, c)] + 1);
                if c + 1 < s {
                    best = best.min(d[idx(r - 1, c + 1)] + 1);
                }
            }
            if c > 0 {
                best = best.min(d[idx(r, c - 1)] + 1);
            }
            d[idx(r, c)] = best;
        }
    }
    for r in (0..s).rev() {
        for c in (0..s).rev() {
            if mask[idx(r, c)] == 0.0 {
                continue;
            }
            let mut best = d[idx(r, c)];
            if r + 1 < s && c + 1 < s {
                best = best.min(d[idx(r + 1, c + 1)] + 1);
            }
            if r + 1 < s {
                best = best.min(d[idx(r + 1, c)] + 1);
                if c > 0 {
                    best = best.min(d[idx(r + 1, c - 1)] + 1);
                }
            }
            if c + 1 < s {
                best = best.min(d[idx(r, c + 1)] + 1);
            }
            d[idx(r, c)] = best;
        }
    }
    d
}

fn try_build_mask(
    spec: &SynthSpec,
    rng: &mut impl Rng,
    n_comp: usize,
    n_holes: usize,
) -> Option<Vec<f32>> {
    let s = spec.size;
    let sf = s as f64;
    let mut mask = vec![0.0f32; s * s];

    for placed in 0..n_comp {
        let mut ok = false;
        for _ in 0..PLACE_ATTEMPTS {
            let mut candidate = mask.clone();
            let a = rng.gen_range(0.14 * sf..0.26 * sf);
            let b = rng.gen_range(0.14 * sf..0.26 * sf);
            let cx = rng.gen_range(0.22 * sf..0.78 * sf);
            let cy = rng.gen_range(0.22 * sf..0.78 * sf);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            stamp_ellipse(&mut candidate, s, cx, cy, a, b, theta, 1.0);
            if betti_numbers(&candidate, s, s, 0.5).ok()? == (placed + 1, 0) {
                mask = candidate;
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }

    for punched in 0..n_holes {
        let mut ok = false;
        for _ in 0..PLACE_ATTEMPTS {
            let radius = rng.gen_range(0.045 * sf..0.09 * sf);
            let margin = radius.ceil() as usize + 2;
            let depth = depth_map(&mask, s);
            let candidates: Vec<usize> =
                (0..s * s).filter(|&i| depth[i] >= margin).collect();
            if candidates.is_empty() {
                continue;
            }
            let center = candidates[rng.gen_range(0..candidates.len())];
            let (cy, cx) = ((center / s) as f64, (center % s) as f64);
            let mut candidate = mask.clone();
            stamp_ellipse(&mut candidate, s, cx, cy, radius, radius, 0.0, 0.0);
            if betti_numbers(&candidate, s, s, 0.5).ok()? == (n_comp, punched + 1) {
                mask = candidate;
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(mask)
}

fn render_image(spec: &SynthSpec, rng: &mut impl Rng, mask: &[f32]) -> Vec<f32> {
    let s = spec.size;
    let speckled: Vec<f64> = mask
        .iter()
        .map(|&m| {
            let base = AMBIENT + spec.contrast * m as f64;
            let n: f64 = rng.sample(StandardNormal);
            base * (1.0 + spec.noise_sigma * n)
        })
        .collect();
    let mut out = vec![0.0f32; s * s];
    for r in 0..s {
        for c in 0..s {
            let mut sum = 0.0;
            let mut count = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nc >= 0 && nr < s as i64 && nc < s as i64 {
                        sum += speckled[nr as usize * s + nc as usize];
                        count += 1.0;
                    }
                }
            }
            out[r * s + c] = (sum / count).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Generates `count` samples, each verified to carry the drawn component
/// and hole counts at threshold 0.5. Sample i depends only on (seed, i).
pub fn generate_synthetic(spec: &SynthSpec, count: usize) -> Result<Vec<Sample>> {
    validate_spec(spec)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = crate::rng::rng_for(spec.seed, "synth", i as u64, 0);
        let mut mask = None;
        for _ in 0..SAMPLE_ATTEMPTS {
            let n_comp = rng.gen_range(spec.n_components.0..=spec.n_components.1);
            let n_holes = rng.gen_range(spec.n_holes.0..=spec.n_holes.1);
            if let Some(m) = try_build_mask(spec, &mut rng, n_comp, n_holes) {
                mask = Some(m);
                break;
            }
        }
        let mask = mask.ok_or_else(|| {
            Error::Data(format!(
                "sample {i}: could not place the requested topology after {SAMPLE_ATTEMPTS} attempts"
            ))
        })?;
        let image = render_image(spec, &mut rng, &mask);
        out.push(Sample { id: format!("s{i:05}"), image, mask, size: spec.size });
    }
    Ok(out)
}

pub fn resize_bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dh * dw];
    let scale_r = sh as f64 / dh as f64;
    let scale_c = sw as f64 / dw as f64;
    for dr in 0..dh {
        let sr = ((dr as f64 + 0.5) * scale_r - 0.5).clamp(0.0, (sh - 1) as f64);
        let r0 = sr.floor() as usize;
        let r1 = (r0 + 1).min(sh - 1);
        let fr = sr - r0 as f64;
        for dc in 0..dw {
            let sc = ((dc as f64 + 0.5) * scale_c - 0.5).clamp(0.0, (sw - 1) as f64);
            let c0 = sc.floor() as usize;
            let c1 = (c0 + 1).min(sw - 1);
            let fc = sc - c0 as f64;
            let v = (1.0 - fr) * (1.0 - fc) * src[r0 * sw + c0] as f64
                + (1.0 - fr) * fc * src[r0 * sw + c1] as f64
                + fr * (1.0 - fc) * src[r1 * sw + c0] as f64
                + fr * fc * src[r1 * sw + c1] as f64;
            out[dr * dw + dc] = v as f32;
        }
    }
    out
}

pub fn resize_nearest(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dh * dw];
    let scale_r = sh as f64 / dh as f64;
    let scale_c = sw as f64 / dw as f64;
    for dr in 0..dh {
        let sr = (((dr as f64 + 0.5) * scale_r - 0.5) + 0.5).floor().clamp(0.0, (sh - 1) as f64)
            as usize;
        for dc in 0..dw {
            let sc = (((dc as f64 + 0.5) * scale_c - 0.5) + 0.5)
                .floor()
                .clamp(0.0, (sw - 1) as f64) as usize;
            out[dr * dw + dc] = src[sr * sw + sc];
        }
    }
    out
}

/// 8-bit grayscale raster with its own extent, normalized to [0,1].
#[derive(Debug)]
struct GrayImage {
    h: usize,
    w: usize,
    values: Vec<f32>,
}

fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| bad(&format!("cannot open ({e})")))?
        .read_to_end(&mut bytes)
        .map_err(|e| bad(&format!("cannot read ({e})")))?;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // with # comments; one whitespace byte follows maxval before the
    // raster.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("unsupported maxval {maxval} (8-bit only)")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero extent"));
    }
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err(bad(&format!("raster truncated: need {} bytes", w * h)));
    }
    let values = bytes[pos..pos + w * h]
        .iter()
        .map(|&b| b as f32 / maxval as f32)
        .collect();
    Ok(GrayImage { h, w, values })
}

fn read_png(path: &Path) -> Result<GrayImage> {
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    let file = fs::File::open(path).map_err(|e| bad(&format!("cannot open ({e})")))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| bad(&format!("bad PNG ({e})")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(&format!("bad PNG ({e})")))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(bad(&format!("not grayscale (color type {:?})", info.color_type)));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad(&format!("not 8-bit (depth {:?})", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let values = buf[..w * h].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(GrayImage { h, w, values })
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png(path),
        _ => Err(Error::Data(format!(
            "{}: unsupported extension (expected .pgm or .png)",
            path.display()
        ))),
    }
}

/// One grayscale raster (PGM or PNG) at its stored extent, scaled to [0,1],
/// returned as (values, height, width).
pub fn load_gray(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = read_gray(path)?;
    Ok((img.values, img.h, img.w))
}

pub fn write_pgm(path: &Path, values: &[f32], h: usize, w: usize) -> Result<()> {
    debug_assert_eq!(values.len(), h * w);
    let mut f = BufWriter::new(fs::File::create(path).map_err(|e| {
        Error::Data(format!("{}: cannot create ({e})", path.display()))
    })?);
    let header = format!("P5\n{w} {h}\n255\n");
    f.write_all(header.as_bytes())?;
    let bytes: Vec<u8> =
        values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

const MASK_THRESHOLD: f32 = 128.0 / 255.0;

fn load_image_file(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = read_gray(path)?;
    Ok(resize_bilinear(&img.values, img.h, img.w, size, size))
}

fn load_mask_file(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = read_gray(path)?;
    let binary: Vec<f32> =
        img.values.iter().map(|&v| if v >= MASK_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Ok(resize_nearest(&binary, img.h, img.w, size, size))
}

/// Loads image/mask pairs matched by file stem across two directories.
pub fn load_pairs(image_dir: &Path, mask_dir: &Path, size: usize) -> Result<Vec<Sample>> {
    let list = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        let mut out = BTreeMap::new();
        let entries = fs::read_dir(dir)
            .map_err(|e| Error::Data(format!("{}: cannot list ({e})", dir.display())))?;
        for entry in entries {
            let path = entry?.path();
            if matches!(path.extension().and_then(|e| e.to_str()), Some("pgm") | Some("png")) {
                let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
                out.insert(stem, path);
            }
        }
        Ok(out)
    };
    let images = list(image_dir)?;
    let masks = list(mask_dir)?;
    let orphans: Vec<String> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .map(|k| format!("{k} (image)"))
        .chain(masks.keys().filter(|k| !images.contains_key(*k)).map(|k| format!("{k} (mask)")))
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Data(format!(
            "unpaired files: {}",
            orphans.join(", ")
        )));
    }
    let mut samples = Vec::new();
    for (stem, img_path) in &images {
        samples.push(Sample {
            id: stem.clone(),
            image: load_image_file(img_path, size)?,
            mask: load_mask_file(&masks[stem], size)?,
            size,
        });
    }
    Ok(samples)
}

/// Writes `images/<id>.pgm`, `masks/<id>.pgm` and `manifest.txt` with one
/// `id image_path mask_path` line per sample (paths relative to the
/// manifest).
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let manifest_path = dir.join("manifest.txt");
    let mut manifest = String::new();
    for s in samples {
        let image_rel = format!("images/{}.pgm", s.id);
        let mask_rel = format!("masks/{}.pgm", s.id);
        write_pgm(&dir.join(&image_rel), &s.image, s.size, s.size)?;
        write_pgm(&dir.join(&mask_rel), &s.mask, s.size, s.size)?;
        manifest.push_str(&format!("{} {} {}\n", s.id, image_rel, mask_rel));
    }
    fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// Loads samples listed in a manifest; relative paths resolve against the
/// manifest's directory.
pub fn load_manifest(manifest_path: &Path, size: usize) -> Result<Vec<Sample>> {
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::Data(format!("{}: cannot read ({e})", manifest_path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected `id image_path mask_path`, got {} fields",
                manifest_path.display(),
                lineno + 1,
                parts.len()
            )));
        }
        samples.push(Sample {
            id: parts[0].to_string(),
            image: load_image_file(&base.join(parts[1]), size)?,
            mask: load_mask_file(&base.join(parts[2]), size)?,
            size,
        });
    }
    Ok(samples)
}

/// Deterministic shuffled partition; boundaries round half up on the
/// cumulative fractions.
pub fn split(
    samples: Vec<Sample>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let (f1, f2, f3) = fractions;
    if (f1 + f2 + f3 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {f1} + {f2} + {f3}"
        )));
    }
    if f1 < 0.0 || f2 < 0.0 || f3 < 0.0 {
        return Err(Error::Config("split fractions must be nonnegative".into()));
    }
    let n = samples.len();
    let b1 = (n as f64 * f1).round() as usize;
    let b2 = (n as f64 * (f1 + f2)).round() as usize;
    for (name, frac, size) in
        [("train", f1, b1), ("val", f2, b2 - b1), ("test", f3, n - b2)]
    {
        if frac > 0.0 && size == 0 {
            return Err(Error::Config(format!(
                "{name} fraction {frac} yields an empty partition of {n} samples"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = crate::rng::rng_for(seed, "split", 0, 0);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut shuffled: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let take = |range: std::ops::Range<usize>, shuffled: &mut Vec<Option<Sample>>| {
        range.map(|k| shuffled[order[k]].take().unwrap()).collect::<Vec<_>>()
    };
    let train = take(0..b1, &mut shuffled);
    let val = take(b1..b2, &mut shuffled);
    let test = take(b2..n, &mut shuffled);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("tdseg_data_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn spec(components: (usize, usize), holes: (usize, usize)) -> SynthSpec {
        SynthSpec { n_components: components, n_holes: holes, seed: 7, ..Default::default() }
    }

    #[test]
    fn single_component_no_holes_masks_verify() {
        let samples = generate_synthetic(&spec((1, 1), (0, 0)), 20).unwrap();
        assert_eq!(samples.len(), 20);
        for s in &samples {
            assert_eq!(betti_numbers(&s.mask, s.size, s.size, 0.5).unwrap(), (1, 0));
        }
    }

    #[test]
    fn single_component_one_hole_masks_verify() {
        let samples = generate_synthetic(&spec((1, 1), (1, 1)), 20).unwrap();
        for s in &samples {
            assert_eq!(betti_numbers(&s.mask, s.size, s.size, 0.5).unwrap(), (1, 1));
        }
    }

    #[test]
    fn ranged_topology_stays_in_range() {
        let samples = generate_synthetic(&spec((1, 2), (0, 2)), 30).unwrap();
        let mut seen_multi = false;
        let mut seen_hole = false;
        for s in &samples {
            let (b0, b1) = betti_numbers(&s.mask, s.size, s.size, 0.5).unwrap();
            assert!((1..=2).contains(&b0), "b0={b0}");
            assert!(b1 <= 2, "b1={b1}");
            seen_multi |= b0 == 2;
            seen_hole |= b1 >= 1;
        }
        assert!(seen_multi && seen_hole, "ranges were never exercised");
    }

    #[test]
    fn same_seed_is_bit_identical_and_prefix_stable() {
        let a = generate_synthetic(&spec((1, 2), (0, 1)), 8).unwrap();
        let b = generate_synthetic(&spec((1, 2), (0, 1)), 8).unwrap();
        assert_eq!(a, b);
        // Sample i depends only on (seed, i), not on count.
        let c = generate_synthetic(&spec((1, 2), (0, 1)), 3).unwrap();
        assert_eq!(&a[..3], &c[..]);
    }

    #[test]
    fn images_are_clamped_speckled_and_contrasted() {
        let sp = spec((1, 1), (0, 0));
        let samples = generate_synthetic(&sp, 10).unwrap();
        for s in &samples {
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.mask.iter().all(|&v| v == 0.0 || v == 1.0));
            let (mut fg, mut nfg, mut bg, mut nbg) = (0.0, 0.0, 0.0, 0.0);
            for (&img, &m) in s.image.iter().zip(&s.mask) {
                if m == 1.0 {
                    fg += img as f64;
                    nfg += 1.0;
                } else {
                    bg += img as f64;
                    nbg += 1.0;
                }
            }
            // Blur bleeds across the boundary; half the nominal contrast is
            // a safe separation at these blob sizes.
            assert!(fg / nfg - bg / nbg > sp.contrast / 2.0);
        }
        // Speckle changes the image given the same mask pipeline.
        let flat = generate_synthetic(
            &SynthSpec { noise_sigma: 0.0, ..spec((1, 1), (0, 0)) },
            1,
        )
        .unwrap();
        let noisy = generate_synthetic(
            &SynthSpec { noise_sigma: 0.2, ..spec((1, 1), (0, 0)) },
            1,
        )
        .unwrap();
        assert_eq!(flat[0].mask, noisy[0].mask);
        assert_ne!(flat[0].image, noisy[0].image);
    }

    #[test]
    fn impossible_topology_reports_the_sample_index() {
        let err = generate_synthetic(&spec((40, 40), (0, 0)), 1).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("sample 0"));
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let bad_size = SynthSpec { size: 8, ..Default::default() };
        assert!(generate_synthetic(&bad_size, 1).unwrap_err().to_string().contains("size"));
        let bad_range = SynthSpec { n_components: (3, 1), ..Default::default() };
        assert!(generate_synthetic(&bad_range, 1)
            .unwrap_err()
            .to_string()
            .contains("n_components"));
        let bad_contrast = SynthSpec { contrast: 0.0, ..Default::default() };
        assert!(generate_synthetic(&bad_contrast, 1)
            .unwrap_err()
            .to_string()
            .contains("contrast"));
    }

    #[test]
    fn pgm_roundtrip_preserves_masks_exactly_and_images_to_one_level() {
        let dir = tmpdir("pgm");
        let samples = generate_synthetic(&spec((1, 1), (1, 1)), 2).unwrap();
        let manifest = write_dataset(&dir, &samples).unwrap();
        let loaded = load_manifest(&manifest, samples[0].size).unwrap();
        assert_eq!(loaded.len(), 2);
        for (orig, back) in samples.iter().zip(&loaded) {
            assert_eq!(orig.id, back.id);
            assert_eq!(orig.mask, back.mask);
            for (&a, &b) in orig.image.iter().zip(&back.image) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn dataset_files_are_byte_deterministic() {
        let dir_a = tmpdir("det_a");
        let dir_b = tmpdir("det_b");
        let samples = generate_synthetic(&spec((1, 1), (0, 1)), 3).unwrap();
        write_dataset(&dir_a, &samples).unwrap();
        write_dataset(&dir_b, &samples).unwrap();
        for rel in ["manifest.txt", "images/s00000.pgm", "masks/s00002.pgm"] {
            assert_eq!(fs::read(dir_a.join(rel)).unwrap(), fs::read(dir_b.join(rel)).unwrap());
        }
        fs::remove_dir_all(&dir_a).unwrap();
        fs::remove_dir_all(&dir_b).unwrap();
    }

    #[test]
    fn mask_binarization_follows_the_127_128_rule() {
        let dir = tmpdir("binarize");
        let path = dir.join("m.pgm");
        let header = b"P5\n4 1\n255\n";
        let mut bytes = header.to_vec();
        bytes.extend_from_slice(&[0, 127, 128, 255]);
        fs::write(&path, bytes).unwrap();
        let mask = load_mask_file(&path, 4).unwrap();
        // Nearest-neighbor 4x1 -> 4x4 repeats the single row.
        assert_eq!(&mask[0..4], &[0.0, 0.0, 1.0, 1.0]);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pgm_header_comments_and_maxval_are_handled() {
        let dir = tmpdir("header");
        let path = dir.join("c.pgm");
        let mut bytes = b"P5\n# a comment\n2 2\n# another\n100\n".to_vec();
        bytes.extend_from_slice(&[0, 50, 100, 25]);
        fs::write(&path, bytes).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!((img.h, img.w), (2, 2));
        assert!((img.values[1] - 0.5).abs() < 1e-6);
        assert!((img.values[2] - 1.0).abs() < 1e-6);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_and_malformed_pgm_are_rejected() {
        let dir = tmpdir("badpgm");
        let path = dir.join("t.pgm");
        fs::write(&path, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(read_pgm(&path).unwrap_err().to_string().contains("truncated"));
        fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
        assert!(read_pgm(&path).unwrap_err().to_string().contains("P5"));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn png_grayscale_loads_and_color_is_rejected() {
        let dir = tmpdir("png");
        let gray_path = dir.join("g.png");
        let write_png = |path: &Path, color: png::ColorType, data: &[u8]| {
            let file = fs::File::create(path).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(file), 2, 2);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(data).unwrap();
        };
        write_png(&gray_path, png::ColorType::Grayscale, &[0, 85, 170, 255]);
        let img = read_png(&gray_path).unwrap();
        assert_eq!((img.h, img.w), (2, 2));
        assert_eq!(img.values[3], 1.0);
        assert!((img.values[1] - 85.0 / 255.0).abs() < 1e-6);

        let rgb_path = dir.join("c.png");
        write_png(&rgb_path, png::ColorType::Rgb, &[0u8; 12]);
        let err = read_png(&rgb_path).unwrap_err();
        assert!(err.to_string().contains("not grayscale"));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn bilinear_resize_matches_hand_values() {
        // Source row [0, 1] upsampled to 4: centers at -0.25, 0.25, 0.75,
        // 1.25 clamp to [0, 1] and interpolate linearly.
        let src = vec![0.0f32, 1.0, 0.0, 1.0];
        let out = resize_bilinear(&src, 2, 2, 4, 4);
        for r in 0..4 {
            let row = &out[r * 4..(r + 1) * 4];
            assert!((row[0] - 0.0).abs() < 1e-6);
            assert!((row[1] - 0.25).abs() < 1e-6);
            assert!((row[2] - 0.75).abs() < 1e-6);
            assert!((row[3] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nearest_resize_keeps_masks_binary() {
        let src = vec![1.0f32, 0.0, 0.0, 1.0];
        let out = resize_nearest(&src, 2, 2, 4, 4);
        let want = [
            1.0, 1.0, 0.0, 0.0, //
            1.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 1.0, //
            0.0, 0.0, 1.0, 1.0,
        ];
        assert_eq!(out, want);
        // Downsample of a binary mask stays binary.
        let down = resize_nearest(&out, 4, 4, 3, 3);
        assert!(down.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn load_pairs_matches_stems_and_reports_orphans() {
        let dir = tmpdir("pairs");
        let (imgs, masks) = (dir.join("imgs"), dir.join("msks"));
        fs::create_dir_all(&imgs).unwrap();
        fs::create_dir_all(&masks).unwrap();
        let samples = generate_synthetic(&spec((1, 1), (0, 0)), 2).unwrap();
        for s in &samples {
            write_pgm(&imgs.join(format!("{}.pgm", s.id)), &s.image, s.size, s.size).unwrap();
            write_pgm(&masks.join(format!("{}.pgm", s.id)), &s.mask, s.size, s.size).unwrap();
        }
        let loaded = load_pairs(&imgs, &masks, 32).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].id, "s00000");
        assert!(loaded.iter().all(|s| s.mask.iter().all(|&v| v == 0.0 || v == 1.0)));

        write_pgm(&imgs.join("lonely.pgm"), &samples[0].image, 32, 32).unwrap();
        let err = load_pairs(&imgs, &masks, 32).unwrap_err();
        assert!(err.to_string().contains("lonely"));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn split_partitions_exactly_and_deterministically() {
        let samples: Vec<Sample> = (0..100)
            .map(|i| Sample {
                id: format!("s{i:05}"),
                image: vec![0.0; 4],
                mask: vec![0.0; 4],
                size: 2,
            })
            .collect();
        let (tr, va, te) = split(samples.clone(), (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        let mut ids: Vec<&str> = tr.iter().chain(&va).chain(&te).map(|s| s.id.as_str()).collect();
        ids.sort();
        let mut want: Vec<String> = (0..100).map(|i| format!("s{i:05}")).collect();
        want.sort();
        assert_eq!(ids, want.iter().map(|s| s.as_str()).collect::<Vec<_>>());
        let (tr2, ..) = split(samples.clone(), (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(
            tr.iter().map(|s| &s.id).collect::<Vec<_>>(),
            tr2.iter().map(|s| &s.id).collect::<Vec<_>>()
        );
        let (tr3, ..) = split(samples.clone(), (0.8, 0.1, 0.1), 4).unwrap();
        assert_ne!(
            tr.iter().map(|s| &s.id).collect::<Vec<_>>(),
            tr3.iter().map(|s| &s.id).collect::<Vec<_>>()
        );
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let samples: Vec<Sample> = (0..2)
            .map(|i| Sample { id: format!("{i}"), image: vec![], mask: vec![], size: 0 })
            .collect();
        assert!(split(samples.clone(), (0.5, 0.2, 0.2), 0).is_err());
        let err = split(samples, (0.4, 0.3, 0.3), 0).unwrap_err();
        assert!(err.to_string().contains("empty partition"));
    }
}
