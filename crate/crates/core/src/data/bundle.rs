//! In-memory dataset bundle and its directory format.
//!
//! A bundle directory holds `schema.txt`, `classes.tsv`, `samples.tsv`,
//! `tensors.bin` and, when part annotations exist, `parts.tsv`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;

use super::schema::{AttributeSchema, ClassInfo, ClassTable, Split};
use super::tensorfile::{read_records, write_records, AnyTensor, TensorRef};
use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::tensor::{Float, Tensor};

/// Every `SEEN_TEST_STRIDE`-th image of a seen class (by order of appearance,
/// 1-based) is held out from training and used as seen-class test data.
pub const SEEN_TEST_STRIDE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    /// Raw `[3,S,S]` images in `[0,1]`.
    Image,
    /// Precomputed `[H,W,C]` feature maps that bypass the encoder.
    Feature,
}

impl InputKind {
    fn prefix(self) -> &'static str {
        match self {
            InputKind::Image => "img/",
            InputKind::Feature => "feat/",
        }
    }
}

/// Ground-truth location of one attribute group's part in an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartAnnotation {
    /// 0-based attribute group index.
    pub part: usize,
    pub bbox: PixelBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image_id: u32,
    pub class_id: u32,
    pub input: Tensor<f32>,
    pub parts: Vec<PartAnnotation>,
}

impl SampleRecord {
    pub fn part(&self, group: usize) -> Option<&PartAnnotation> {
        self.parts.iter().find(|p| p.part == group)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub schema: AttributeSchema,
    pub classes: ClassTable,
    pub samples: Vec<SampleRecord>,
    pub input_kind: InputKind,
}

/// Sample indices of a bundle by role.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub seen_test: Vec<usize>,
    pub unseen: Vec<usize>,
    pub val: Vec<usize>,
}

impl Partition {
    /// Held-out images of seen and unseen classes.
    pub fn test(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.seen_test.iter().chain(&self.unseen).copied().collect();
        all.sort_unstable();
        all
    }
}

impl DatasetBundle {
    pub fn new(
        schema: AttributeSchema,
        classes: ClassTable,
        samples: Vec<SampleRecord>,
        input_kind: InputKind,
    ) -> Result<Self> {
        let b = DatasetBundle {
            schema,
            classes,
            samples,
            input_kind,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema.k() != self.classes.k() {
            return Err(Error::InvalidData(format!(
                "schema has K = {} attributes but class vectors have {}",
                self.schema.k(),
                self.classes.k()
            )));
        }
        let Some(first) = self.samples.first() else {
            return Err(Error::InvalidData("bundle has no samples".into()));
        };
        let shape = first.input.shape().to_vec();
        match self.input_kind {
            InputKind::Image if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] => {
                return Err(Error::InvalidData(format!(
                    "images must be [3,S,S], got {shape:?}"
                )))
            }
            InputKind::Feature if shape.len() != 3 => {
                return Err(Error::InvalidData(format!(
                    "feature maps must be [H,W,C], got {shape:?}"
                )))
            }
            _ => {}
        }
        let (h, w) = self.spatial_size();
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.image_id) {
                return Err(Error::InvalidData(format!(
                    "duplicate image id {}",
                    s.image_id
                )));
            }
            if self.classes.get(s.class_id).is_none() {
                return Err(Error::InvalidData(format!(
                    "image {} references unknown class {}",
                    s.image_id, s.class_id
                )));
            }
            if s.input.shape() != shape.as_slice() {
                return Err(Error::InvalidData(format!(
                    "image {} has shape {:?}, expected {shape:?}",
                    s.image_id,
                    s.input.shape()
                )));
            }
            for p in &s.parts {
                if p.part >= self.schema.l() {
                    return Err(Error::InvalidData(format!(
                        "image {} annotates part {} but there are {} groups",
                        s.image_id,
                        p.part + 1,
                        self.schema.l()
                    )));
                }
                if !p.bbox.within(w, h) {
                    return Err(Error::InvalidData(format!(
                        "image {} part {} box {:?} outside {w}x{h}",
                        s.image_id,
                        p.part + 1,
                        p.bbox
                    )));
                }
            }
        }
        Ok(())
    }

    /// Spatial size `(H, W)` of the stored inputs.
    pub fn spatial_size(&self) -> (usize, usize) {
        let s = self.samples[0].input.shape();
        match self.input_kind {
            InputKind::Image => (s[1], s[2]),
            InputKind::Feature => (s[0], s[1]),
        }
    }

    /// Channels of the stored inputs (3 for images).
    pub fn input_channels(&self) -> usize {
        let s = self.samples[0].input.shape();
        match self.input_kind {
            InputKind::Image => s[0],
            InputKind::Feature => s[2],
        }
    }

    /// Model input `[C,H,W]` for sample `index`.
    pub fn model_input<T: Float>(&self, index: usize) -> Tensor<T> {
        let input = &self.samples[index].input;
        match self.input_kind {
            InputKind::Image => input.cast(),
            InputKind::Feature => {
                let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let src = input.data();
                let mut out = Vec::with_capacity(src.len());
                for ch in 0..c {
                    for p in 0..h * w {
                        out.push(T::from_f64(src[p * c + ch] as f64));
                    }
                }
                Tensor::new(vec![c, h, w], out).expect("shape preserved")
            }
        }
    }

    /// Stacks the model inputs of `indices` into an `[N,C,H,W]` batch.
    pub fn batch<T: Float>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let items: Vec<Tensor<T>> = indices.iter().map(|&i| self.model_input(i)).collect();
        let refs: Vec<&Tensor<T>> = items.iter().collect();
        Tensor::stack(&refs)
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.classes
            .get(self.samples[index].class_id)
            .expect("validated")
            .split
    }

    pub fn partition(&self) -> Partition {
        let mut part = Partition::default();
        let mut ordinal: HashMap<u32, usize> = HashMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            match self.split_of(i) {
                Split::Seen => {
                    let n = ordinal.entry(s.class_id).or_insert(0);
                    *n += 1;
                    if (*n).is_multiple_of(SEEN_TEST_STRIDE) {
                        part.seen_test.push(i);
                    } else {
                        part.train.push(i);
                    }
                }
                Split::Unseen => part.unseen.push(i),
                Split::Val => part.val.push(i),
            }
        }
        part
    }

    /// Indices of all samples of class `id`, in bundle order.
    pub fn samples_of(&self, id: u32) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.class_id == id)
            .map(|(i, _)| i)
            .collect()
    }

    /// `[J,K]` matrix of the attribute vectors of `ids`.
    pub fn class_matrix<T: Float>(&self, ids: &[u32]) -> Result<Tensor<T>> {
        if ids.is_empty() {
            return Err(Error::Empty("class set".into()));
        }
        let k = self.classes.k();
        let mut data = Vec::with_capacity(ids.len() * k);
        for id in ids {
            let c = self
                .classes
                .get(*id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown class {id}")))?;
            data.extend(c.attrs.iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::new(vec![ids.len(), k], data)
    }
}

// ------------------------------------------------------------------ save

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `bundle` into `dir`, creating the directory if needed.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let schema = &bundle.schema;

    let mut text = format!("{} {}\n", schema.k(), schema.l());
    for (a, name) in schema.names().iter().enumerate() {
        let group = schema.group_of(a).map_or(0, |g| g + 1);
        text.push_str(&format!("{} {} {}\n", a + 1, group, name));
    }
    for (l, name) in schema.group_names().iter().enumerate() {
        text.push_str(&format!("group {} {}\n", l + 1, name));
    }
    write_file(&dir.join("schema.txt"), &text)?;

    let mut text = String::new();
    for c in bundle.classes.classes() {
        text.push_str(&format!("{}\t{}", c.id, c.split.as_str()));
        for v in &c.attrs {
            text.push_str(&format!("\t{v}"));
        }
        text.push('\n');
    }
    write_file(&dir.join("classes.tsv"), &text)?;

    let mut text = String::new();
    let mut parts = String::new();
    for s in &bundle.samples {
        text.push_str(&format!("{}\t{}\n", s.image_id, s.class_id));
        for p in &s.parts {
            let b = p.bbox;
            parts.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                s.image_id,
                p.part + 1,
                b.x0,
                b.y0,
                b.x1,
                b.y1
            ));
        }
    }
    write_file(&dir.join("samples.tsv"), &text)?;
    let parts_path = dir.join("parts.tsv");
    if parts.is_empty() {
        if parts_path.exists() {
            fs::remove_file(&parts_path).map_err(|e| Error::io(&parts_path, e))?;
        }
    } else {
        write_file(&parts_path, &parts)?;
    }

    let path = dir.join("tensors.bin");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let prefix = bundle.input_kind.prefix();
    let records = bundle
        .samples
        .iter()
        .map(|s| (format!("{prefix}{}", s.image_id), TensorRef::F32(&s.input)));
    write_records(records, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}

// ------------------------------------------------------------------ load

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_num<N: std::str::FromStr>(
    tok: Option<&str>,
    path: &Path,
    line: usize,
    what: &str,
) -> Result<N> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            detail: format!("expected {what}"),
        })
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn load_schema(path: &Path) -> Result<AttributeSchema> {
    let text = read_text(path)?;
    let mut lines = content_lines(&text);
    let (ln, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        detail: "missing `K L` header".into(),
    })?;
    let mut tok = header.split_whitespace();
    let k: usize = parse_num(tok.next(), path, ln, "attribute count K")?;
    let l: usize = parse_num(tok.next(), path, ln, "group count L")?;
    let mut names = vec![None; k];
    let mut groups = vec![Vec::new(); l];
    let mut group_names: Vec<String> = (1..=l).map(|g| format!("group{g}")).collect();
    for (ln, line) in lines {
        if let Some(rest) = line.strip_prefix("group ") {
            let mut tok = rest.trim().splitn(2, char::is_whitespace);
            let g: usize = parse_num(tok.next(), path, ln, "group index")?;
            if g == 0 || g > l {
                return Err(Error::DimensionMismatch {
                    path: path.to_path_buf(),
                    detail: format!("line {ln}: group {g} outside 1..={l}"),
                });
            }
            group_names[g - 1] = tok.next().unwrap_or("").trim().to_string();
            continue;
        }
        let mut tok = line.splitn(3, char::is_whitespace);
        let a: usize = parse_num(tok.next(), path, ln, "attribute index")?;
        let g: usize = parse_num(tok.next(), path, ln, "group index")?;
        let name = tok.next().unwrap_or("").trim().to_string();
        if a == 0 || a > k {
            return Err(Error::DimensionMismatch {
                path: path.to_path_buf(),
                detail: format!("line {ln}: attribute {a} outside 1..={k}"),
            });
        }
        if g > l {
            return Err(Error::DimensionMismatch {
                path: path.to_path_buf(),
                detail: format!("line {ln}: group {g} outside 0..={l}"),
            });
        }
        if names[a - 1].replace(name).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: ln,
                detail: format!("attribute {a} listed twice"),
            });
        }
        if g > 0 {
            groups[g - 1].push(a - 1);
        }
    }
    let names: Vec<String> = names
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            n.ok_or_else(|| Error::DimensionMismatch {
                path: path.to_path_buf(),
                detail: format!("attribute {} of {k} is not listed", i + 1),
            })
        })
        .collect::<Result<_>>()?;
    AttributeSchema::new(names, groups, group_names).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        detail: e.to_string(),
    })
}

fn load_classes(path: &Path, k: usize) -> Result<ClassTable> {
    let text = read_text(path)?;
    let mut classes = Vec::new();
    for (ln, line) in content_lines(&text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != k + 2 {
            return Err(Error::DimensionMismatch {
                path: path.to_path_buf(),
                detail: format!(
                    "line {ln}: expected {k} attribute values, found {}",
                    fields.len().saturating_sub(2)
                ),
            });
        }
        let id: u32 = parse_num(Some(fields[0]), path, ln, "class id")?;
        let split = Split::parse(fields[1]).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: ln,
            detail: format!("unknown split `{}`", fields[1]),
        })?;
        let attrs = fields[2..]
            .iter()
            .map(|t| parse_num::<f32>(Some(t), path, ln, "attribute value"))
            .collect::<Result<Vec<_>>>()?;
        classes.push(ClassInfo { id, split, attrs });
    }
    let mut table = ClassTable::new(classes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        detail: e.to_string(),
    })?;
    if !table.is_normalized() {
        warn!(
            "{}: attribute values outside [0,1]; applying per-column min-max normalisation",
            path.display()
        );
        table.minmax_normalize();
    }
    Ok(table)
}

/// Reads a bundle directory written by [`save_bundle`] (or assembled by hand).
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let schema = load_schema(&dir.join("schema.txt"))?;
    let classes = load_classes(&dir.join("classes.tsv"), schema.k())?;

    let samples_path = dir.join("samples.tsv");
    let text = read_text(&samples_path)?;
    let mut pairs = Vec::new();
    for (ln, line) in content_lines(&text) {
        let mut tok = line.split_whitespace();
        let image: u32 = parse_num(tok.next(), &samples_path, ln, "image id")?;
        let class: u32 = parse_num(tok.next(), &samples_path, ln, "class id")?;
        pairs.push((image, class));
    }

    let parts_path = dir.join("parts.tsv");
    let mut parts: HashMap<u32, Vec<PartAnnotation>> = HashMap::new();
    if parts_path.exists() {
        let text = read_text(&parts_path)?;
        for (ln, line) in content_lines(&text) {
            let v = line
                .split_whitespace()
                .map(|t| parse_num::<usize>(Some(t), &parts_path, ln, "integer"))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != 6 || v[1] == 0 || v[2] > v[4] || v[3] > v[5] {
                return Err(Error::Parse {
                    path: parts_path.clone(),
                    line: ln,
                    detail: "expected `image_id part_id x0 y0 x1 y1` with part_id >= 1".into(),
                });
            }
            parts.entry(v[0] as u32).or_default().push(PartAnnotation {
                part: v[1] - 1,
                bbox: PixelBox::new(v[2], v[3], v[4], v[5]),
            });
        }
    }

    let tensors_path = dir.join("tensors.bin");
    let bytes = fs::read(&tensors_path).map_err(|e| Error::io(&tensors_path, e))?;
    let (records, used) = read_records(&bytes, &tensors_path)?;
    if used != bytes.len() {
        return Err(Error::InvalidData(format!(
            "{}: {} trailing bytes",
            tensors_path.display(),
            bytes.len() - used
        )));
    }
    drop(bytes);
    let mut kind = None;
    let mut inputs: HashMap<u32, Tensor<f32>> = HashMap::with_capacity(records.len());
    for (name, tensor) in records {
        let (this_kind, id) = if let Some(id) = name.strip_prefix("img/") {
            (InputKind::Image, id)
        } else if let Some(id) = name.strip_prefix("feat/") {
            (InputKind::Feature, id)
        } else {
            return Err(Error::InvalidData(format!(
                "{}: unexpected record `{name}`",
                tensors_path.display()
            )));
        };
        if kind.is_some_and(|k| k != this_kind) {
            return Err(Error::InvalidData(format!(
                "{}: bundle mixes raw images and feature maps",
                tensors_path.display()
            )));
        }
        kind = Some(this_kind);
        let id: u32 = id.parse().map_err(|_| {
            Error::InvalidData(format!(
                "{}: bad record name `{name}`",
                tensors_path.display()
            ))
        })?;
        let t = match tensor {
            AnyTensor::F32(t) => t,
            other => other.into_f32(),
        };
        inputs.insert(id, t);
    }
    let kind =
        kind.ok_or_else(|| Error::InvalidData(format!("{}: no records", tensors_path.display())))?;

    let mut samples = Vec::with_capacity(pairs.len());
    for (image_id, class_id) in pairs {
        let input = inputs.remove(&image_id).ok_or_else(|| {
            Error::InvalidData(format!(
                "{}: no tensor for image {image_id}",
                tensors_path.display()
            ))
        })?;
        samples.push(SampleRecord {
            image_id,
            class_id,
            input,
            parts: parts.remove(&image_id).unwrap_or_default(),
        });
    }
    if let Some(id) = inputs.keys().next() {
        return Err(Error::InvalidData(format!(
            "{}: tensor for image {id} has no samples.tsv entry",
            tensors_path.display()
        )));
    }
    if let Some(id) = parts.keys().next() {
        return Err(Error::InvalidData(format!(
            "{}: annotation for unknown image {id}",
            parts_path.display()
        )));
    }
    DatasetBundle::new(schema, classes, samples, kind)
}
