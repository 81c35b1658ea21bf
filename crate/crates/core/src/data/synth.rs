//! Synthetic attribute-grounded images with known part locations.
//!
//! The image is divided into a grid of slots, one per attribute group. Each
//! group owns a glyph shape and each attribute its own colour, so an
//! attribute is a unique (colour, shape) pair drawn inside its group's slot.
//! A class activates exactly one attribute per group; unseen classes are
//! attribute combinations absent from the seen classes.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bundle::{DatasetBundle, InputKind, PartAnnotation, SampleRecord};
use super::schema::{AttributeSchema, ClassInfo, ClassTable, Split};
use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_unseen: usize,
    /// Classes held out for hyper-parameter validation.
    pub n_val: usize,
    pub k_attrs: usize,
    pub l_groups: usize,
    pub image_size: usize,
    pub imgs_per_class: usize,
    pub seed: u64,
    /// Half-width of the uniform jitter added to φ before clipping to `[0,1]`.
    pub jitter: f32,
    /// Amplitude of the uniform background speckle.
    pub noise: f32,
}

impl Default for SynthConfig {
    /// 25 classes (5 unseen), 12 attributes in 4 groups, 64×64 images,
    /// 200 images per class, seed 7.
    fn default() -> Self {
        SynthConfig {
            n_classes: 25,
            n_unseen: 5,
            n_val: 0,
            k_attrs: 12,
            l_groups: 4,
            image_size: 64,
            imgs_per_class: 200,
            seed: 7,
            jitter: 0.0,
            noise: 0.1,
        }
    }
}

impl SynthConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<N: std::str::FromStr>(v: &str) -> std::result::Result<N, String> {
            v.parse().map_err(|_| format!("invalid number `{v}`"))
        }
        match key {
            "n_classes" => self.n_classes = num(value)?,
            "n_unseen" => self.n_unseen = num(value)?,
            "n_val" => self.n_val = num(value)?,
            "k_attrs" => self.k_attrs = num(value)?,
            "l_groups" => self.l_groups = num(value)?,
            "image_size" => self.image_size = num(value)?,
            "imgs_per_class" => self.imgs_per_class = num(value)?,
            "seed" => self.seed = num(value)?,
            "jitter" => self.jitter = num(value)?,
            "noise" => self.noise = num(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` comments) over the defaults.
    pub fn from_text(text: &str, path: &std::path::Path) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "n_classes = {}\nn_unseen = {}\nn_val = {}\nk_attrs = {}\nl_groups = {}\nimage_size = {}\n\
             imgs_per_class = {}\nseed = {}\njitter = {}\nnoise = {}\n",
            self.n_classes,
            self.n_unseen,
            self.n_val,
            self.k_attrs,
            self.l_groups,
            self.image_size,
            self.imgs_per_class,
            self.seed,
            self.jitter,
            self.noise
        )
    }
}

/// Slot grid geometry shared by the renderer and callers that need to know
/// where parts can appear.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotLayout {
    pub grid: usize,
    pub slot: usize,
    pub glyph: usize,
}

impl SlotLayout {
    pub fn new(image_size: usize, groups: usize) -> Result<Self> {
        let grid = (1..).find(|g| g * g >= groups.max(1)).expect("unbounded");
        let slot = image_size / grid;
        let glyph = slot * 9 / 16;
        if glyph < 2 {
            return Err(Error::Infeasible(format!(
                "image size {image_size} is too small for {groups} glyph slots"
            )));
        }
        Ok(SlotLayout { grid, slot, glyph })
    }

    pub fn slot_origin(&self, group: usize) -> (usize, usize) {
        (
            (group % self.grid) * self.slot,
            (group / self.grid) * self.slot,
        )
    }

    /// Inclusive range of glyph offsets inside a slot.
    pub fn offset_range(&self) -> (usize, usize) {
        let free = self.slot - self.glyph;
        let margin = free / 4;
        (margin, free - margin)
    }
}

const SHAPES: [&str; 10] = [
    "square", "diamond", "disc", "triangle", "ring", "plus", "cross", "hstripes", "vstripes",
    "checker",
];

/// Glyph of group `l`. The first groups get the filled shapes.
fn group_shape(l: usize) -> usize {
    l
}

fn shape_name(v: usize) -> String {
    SHAPES
        .get(v)
        .map_or_else(|| format!("pattern{v}"), |s| s.to_string())
}

/// Colour of attribute `v` of group `l`: a point on the hue wheel. Hues are
/// interleaved so that the attributes of one group lie `360/V` degrees apart.
fn attr_color(l: usize, v: usize, groups: usize, variants: usize) -> ([f32; 3], String) {
    let k = groups * variants;
    let slot = v * groups + l;
    let h = slot as f32 / k as f32 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (hi, lo) = (0.95, 0.1);
    let mix = |t: f32| lo + (hi - lo) * t;
    let rgb = match h as usize {
        0 => [hi, mix(x), lo],
        1 => [mix(x), hi, lo],
        2 => [lo, hi, mix(x)],
        3 => [lo, mix(x), hi],
        4 => [mix(x), lo, hi],
        _ => [hi, lo, mix(x)],
    };
    (rgb, format!("hue{:03}", slot * 360 / k))
}

/// Whether glyph `variant` paints pixel `(x, y)` of a `size × size` cell.
fn glyph_pixel(variant: usize, x: usize, y: usize, size: usize) -> bool {
    let t = (size / 5).max(1);
    let c = (size - 1) as isize;
    let (xi, yi) = (x as isize, y as isize);
    match variant {
        0 => true,
        1 => (2 * xi - c).abs() + (2 * yi - c).abs() <= c + 1,
        2 => (2 * xi - c).pow(2) + (2 * yi - c).pow(2) <= (c + 1).pow(2),
        3 => (2 * xi - c).abs() <= yi + 1,
        4 => x < t || y < t || x >= size - t || y >= size - t,
        5 => {
            let lo = (size - t) / 2;
            (lo..lo + t).contains(&x) || (lo..lo + t).contains(&y)
        }
        6 => (xi - yi).unsigned_abs() < t || (xi + yi - c).unsigned_abs() < t,
        7 => (y / t).is_multiple_of(2),
        8 => (x / t).is_multiple_of(2),
        9 => ((x / t) + (y / t)).is_multiple_of(2),
        v => {
            // Deterministic hashed texture; the top-left pixel is always on.
            let h = (v as u64)
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(((x / t) * 131 + (y / t) * 17) as u64)
                .wrapping_mul(0xbf58_476d_1ce4_e5b9);
            (x == 0 && y == 0) || (h >> 61).is_multiple_of(2)
        }
    }
}

fn decode_signature(mut index: usize, variants: usize, groups: usize) -> Vec<usize> {
    let mut sig = Vec::with_capacity(groups);
    for _ in 0..groups {
        sig.push(index % variants);
        index /= variants;
    }
    sig
}

fn covers_all(signatures: &[Vec<usize>], variants: usize, groups: usize) -> bool {
    let mut hit = vec![false; variants * groups];
    for sig in signatures {
        for (l, &v) in sig.iter().enumerate() {
            hit[l * variants + v] = true;
        }
    }
    hit.into_iter().all(|h| h)
}

fn pick_signatures(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let (k, l, n) = (cfg.k_attrs, cfg.l_groups, cfg.n_classes);
    let variants = k / l;
    let total = (variants as u128)
        .checked_pow(l as u32)
        .unwrap_or(u128::MAX);
    if n as u128 > total {
        return Err(Error::Infeasible(format!(
            "{n} classes requested but only {variants}^{l} = {total} distinct attribute signatures exist"
        )));
    }
    let n_seen = n - cfg.n_unseen - cfg.n_val;
    if n_seen < variants {
        return Err(Error::Infeasible(format!(
            "{n_seen} seen classes cannot cover all {variants} attributes of every group"
        )));
    }
    for _ in 0..1000 {
        let sigs: Vec<Vec<usize>> = if total <= 1 << 20 {
            rand::seq::index::sample(rng, total as usize, n)
                .into_iter()
                .map(|i| decode_signature(i, variants, l))
                .collect()
        } else {
            let mut set = HashSet::new();
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let sig: Vec<usize> = (0..l).map(|_| rng.gen_range(0..variants)).collect();
                if set.insert(sig.clone()) {
                    out.push(sig);
                }
            }
            out
        };
        if covers_all(&sigs[..n_seen], variants, l) {
            return Ok(sigs);
        }
    }
    Err(Error::Infeasible(
        "could not draw seen classes covering every attribute".into(),
    ))
}

/// Draws a bundle of synthetic images. Deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetBundle> {
    let (k, l) = (cfg.k_attrs, cfg.l_groups);
    if l == 0 || k == 0 || k % l != 0 {
        return Err(Error::InvalidArgument(format!(
            "k_attrs ({k}) must be a positive multiple of l_groups ({l})"
        )));
    }
    if cfg.n_classes == 0 || cfg.n_unseen + cfg.n_val >= cfg.n_classes {
        return Err(Error::InvalidArgument(format!(
            "need more classes ({}) than unseen ({}) plus validation ({}) classes",
            cfg.n_classes, cfg.n_unseen, cfg.n_val
        )));
    }
    if cfg.imgs_per_class == 0 {
        return Err(Error::InvalidArgument(
            "imgs_per_class must be positive".into(),
        ));
    }
    let layout = SlotLayout::new(cfg.image_size, l)?;
    let variants = k / l;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut names = Vec::with_capacity(k);
    let mut groups = Vec::with_capacity(l);
    let mut group_names = Vec::with_capacity(l);
    for g in 0..l {
        let shape = shape_name(group_shape(g));
        for v in 0..variants {
            let (_, color) = attr_color(g, v, l, variants);
            names.push(format!("{color}_{shape}"));
        }
        groups.push((g * variants..(g + 1) * variants).collect());
        group_names.push(format!("slot{}_{shape}", g + 1));
    }
    let schema = AttributeSchema::new(names, groups, group_names)?;

    let sigs = pick_signatures(cfg, &mut rng)?;
    let n_seen = cfg.n_classes - cfg.n_unseen - cfg.n_val;
    let mut roles: Vec<(Vec<usize>, Split)> = sigs
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let split = if i < n_seen {
                Split::Seen
            } else if i < n_seen + cfg.n_unseen {
                Split::Unseen
            } else {
                Split::Val
            };
            (s, split)
        })
        .collect();
    roles.shuffle(&mut rng);

    let mut classes = Vec::with_capacity(cfg.n_classes);
    for (i, (sig, split)) in roles.iter().enumerate() {
        let mut attrs = vec![0.0f32; k];
        for (g, &v) in sig.iter().enumerate() {
            attrs[g * variants + v] = 1.0;
        }
        if cfg.jitter > 0.0 {
            for a in &mut attrs {
                *a = (*a + rng.gen_range(-cfg.jitter..=cfg.jitter)).clamp(0.0, 1.0);
            }
        }
        classes.push(ClassInfo {
            id: i as u32 + 1,
            split: *split,
            attrs,
        });
    }

    let mut samples = Vec::with_capacity(cfg.n_classes * cfg.imgs_per_class);
    let mut next_id = 1u32;
    for (i, (sig, _)) in roles.iter().enumerate() {
        for _ in 0..cfg.imgs_per_class {
            let (input, parts) = render(cfg, &layout, sig, &mut rng);
            samples.push(SampleRecord {
                image_id: next_id,
                class_id: i as u32 + 1,
                input,
                parts,
            });
            next_id += 1;
        }
    }

    let bundle = DatasetBundle::new(schema, ClassTable::new(classes)?, samples, InputKind::Image)?;
    validate_signatures(&bundle)?;
    Ok(bundle)
}

fn render(
    cfg: &SynthConfig,
    layout: &SlotLayout,
    signature: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Tensor<f32>, Vec<PartAnnotation>) {
    let s = cfg.image_size;
    let plane = s * s;
    let mut data: Vec<f32> = (0..3 * plane)
        .map(|_| rng.gen::<f32>() * cfg.noise)
        .collect();
    let (lo, hi) = layout.offset_range();
    let mut parts = Vec::with_capacity(signature.len());
    for (g, &variant) in signature.iter().enumerate() {
        let (color, _) = attr_color(g, variant, signature.len(), cfg.k_attrs / cfg.l_groups);
        let shape = group_shape(g);
        let (sx, sy) = layout.slot_origin(g);
        let ox = sx + rng.gen_range(lo..=hi);
        let oy = sy + rng.gen_range(lo..=hi);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..layout.glyph {
            for x in 0..layout.glyph {
                if !glyph_pixel(shape, x, y, layout.glyph) {
                    continue;
                }
                let (px, py) = (ox + x, oy + y);
                for (ch, &c) in color.iter().enumerate() {
                    data[ch * plane + py * s + px] = c;
                }
                x0 = x0.min(px);
                y0 = y0.min(py);
                x1 = x1.max(px);
                y1 = y1.max(py);
            }
        }
        parts.push(PartAnnotation {
            part: g,
            bbox: PixelBox::new(x0, y0, x1, y1),
        });
    }
    (
        Tensor::new(vec![3, s, s], data).expect("3·S·S values"),
        parts,
    )
}

/// Active attribute per group: the argmax of φ restricted to the group.
pub fn signature_of(attrs: &[f32], schema: &AttributeSchema) -> Vec<usize> {
    schema
        .groups()
        .iter()
        .map(|g| {
            let mut best = g[0];
            for &a in g {
                if attrs[a] > attrs[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

/// Checks that no unseen (or validation) class repeats a seen signature and
/// that the seen classes jointly exhibit every attribute.
pub fn validate_signatures(bundle: &DatasetBundle) -> Result<()> {
    let schema = &bundle.schema;
    let mut seen_sigs = HashSet::new();
    let mut covered = vec![false; schema.k()];
    for c in bundle
        .classes
        .classes()
        .iter()
        .filter(|c| c.split == Split::Seen)
    {
        let sig = signature_of(&c.attrs, schema);
        for &a in &sig {
            covered[a] = true;
        }
        seen_sigs.insert(sig);
    }
    for c in bundle
        .classes
        .classes()
        .iter()
        .filter(|c| c.split != Split::Seen)
    {
        if seen_sigs.contains(&signature_of(&c.attrs, schema)) {
            return Err(Error::InvalidData(format!(
                "class {} repeats a seen attribute signature",
                c.id
            )));
        }
    }
    if let Some(a) = covered.iter().position(|&c| !c) {
        return Err(Error::InvalidData(format!(
            "attribute {} ({}) never occurs in a seen class",
            a + 1,
            schema.names()[a]
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_classes: 6,
            n_unseen: 2,
            k_attrs: 6,
            l_groups: 2,
            image_size: 16,
            imgs_per_class: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn smallest_instance() {
        let cfg = SynthConfig {
            n_classes: 2,
            n_unseen: 0,
            k_attrs: 2,
            l_groups: 1,
            image_size: 8,
            imgs_per_class: 1,
            ..SynthConfig::default()
        };
        let b = generate_synthetic(&cfg).unwrap();
        let mut sigs: Vec<Vec<f32>> = b
            .classes
            .classes()
            .iter()
            .map(|c| c.attrs.clone())
            .collect();
        sigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(sigs, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn infeasible_signature_count() {
        let cfg = SynthConfig {
            n_classes: 10,
            k_attrs: 6,
            l_groups: 2,
            ..small()
        };
        let err = generate_synthetic(&cfg).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err}");
        assert!(err.to_string().contains("3^2 = 9"));
    }

    #[test]
    fn k_not_divisible_by_l() {
        let cfg = SynthConfig {
            k_attrs: 7,
            ..small()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_synthetic(&small()).unwrap(),
            generate_synthetic(&small()).unwrap()
        );
        let other = SynthConfig { seed: 8, ..small() };
        assert_ne!(
            generate_synthetic(&small()).unwrap(),
            generate_synthetic(&other).unwrap()
        );
    }

    #[test]
    fn boxes_cover_exactly_the_painted_glyph() {
        let cfg = small();
        let b = generate_synthetic(&cfg).unwrap();
        let s = cfg.image_size;
        let layout = SlotLayout::new(s, cfg.l_groups).unwrap();
        for sample in &b.samples {
            let class = b.classes.get(sample.class_id).unwrap();
            let sig = signature_of(&class.attrs, &b.schema);
            for p in &sample.parts {
                let v = sig[p.part] - p.part * (cfg.k_attrs / cfg.l_groups);
                let (color, _) = attr_color(p.part, v, cfg.l_groups, cfg.k_attrs / cfg.l_groups);
                // Glyph colour pixels in this slot define the extent.
                let (sx, sy) = layout.slot_origin(p.part);
                let mut ext = (usize::MAX, usize::MAX, 0, 0);
                for y in sy..sy + layout.slot {
                    for x in sx..sx + layout.slot {
                        let px: Vec<f32> = (0..3).map(|c| sample.input.at(&[c, y, x])).collect();
                        if px == color {
                            ext = (ext.0.min(x), ext.1.min(y), ext.2.max(x), ext.3.max(y));
                        }
                    }
                }
                assert_eq!(PixelBox::new(ext.0, ext.1, ext.2, ext.3), p.bbox);
            }
        }
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = SynthConfig {
            n_val: 3,
            noise: 0.25,
            ..small()
        };
        let back = SynthConfig::from_text(&cfg.to_text(), std::path::Path::new("s.cfg")).unwrap();
        assert_eq!(back, cfg);
        assert!(SynthConfig::from_text("colors = 3", std::path::Path::new("s.cfg")).is_err());
    }

    #[test]
    fn every_shape_paints_its_top_row() {
        for v in 0..12 {
            for size in [3, 9, 18] {
                assert!(
                    (0..size).any(|x| glyph_pixel(v, x, 0, size)),
                    "variant {v} size {size}"
                );
            }
        }
    }
}
