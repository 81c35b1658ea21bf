//! Attribute localization from upsampled similarity maps, PCP and heatmap
//! export as binary PGM/PPM.

use std::fs;
use std::path::{Path, PathBuf};

use super::map_traces;
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::model::{ForwardTrace, LossConfig, ModelParams};
use crate::tensor::{upsample_to_input, Float, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Localization<T: Float = f32> {
    /// Similarity map upsampled to `S×S`.
    pub heatmap: Tensor<T>,
    /// Peak as `(x, y)` pixel coordinates.
    pub peak: (usize, usize),
    pub bbox: PixelBox,
}

/// Row-major-first argmax of an `[H,W]` map as `(x, y)`.
fn peak_xy<T: Float>(map: &Tensor<T>) -> (usize, usize) {
    let w = map.shape()[1];
    let d = map.data();
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v > d[best] {
            best = i;
        }
    }
    (best % w, best / w)
}

/// Upsampled map of attribute `k`, its peak and a square box of side
/// `rho·size` around it. The object box is taken to be the whole image.
pub fn localize<T: Float>(
    trace: &ForwardTrace<T>,
    k: usize,
    size: usize,
    rho: f64,
) -> Result<Localization<T>> {
    let kk = trace.sim.shape()[0];
    if k >= kk {
        return Err(Error::InvalidArgument(format!(
            "attribute {k} outside 0..{kk}"
        )));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rho must lie in (0, 1], got {rho}"
        )));
    }
    let heatmap = upsample_to_input(&trace.sim.slice_outer(k)?, size, size)?;
    let peak = peak_xy(&heatmap);
    let side = ((rho * size as f64).round() as usize).max(1);
    let bbox = PixelBox::centered_square(peak.0, peak.1, side, size, size);
    Ok(Localization {
        heatmap,
        peak,
        bbox,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartScore {
    pub part: usize,
    pub name: String,
    pub correct: usize,
    pub total: usize,
}

impl PartScore {
    pub fn score(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcpReport {
    pub parts: Vec<PartScore>,
    /// Mean over parts that were evaluated at least once.
    pub mean: f64,
    /// Images missing at least one part annotation.
    pub skipped: usize,
}

/// PCP for arbitrary peak predictions: `peak(sample, group)` returns the
/// `(x, y)` point predicted for that group's part.
pub fn pcp_from_peaks<F>(
    bundle: &DatasetBundle,
    indices: &[usize],
    mut peak: F,
) -> Result<PcpReport>
where
    F: FnMut(usize, usize) -> Option<(usize, usize)>,
{
    let l = bundle.schema.l();
    if l == 0 {
        return Err(Error::InvalidArgument("PCP needs attribute groups".into()));
    }
    let mut parts: Vec<PartScore> = bundle
        .schema
        .group_names()
        .iter()
        .enumerate()
        .map(|(part, name)| PartScore {
            part,
            name: name.clone(),
            correct: 0,
            total: 0,
        })
        .collect();
    let mut skipped = 0;
    for &i in indices {
        let sample = &bundle.samples[i];
        let mut missing = false;
        for (g, score) in parts.iter_mut().enumerate() {
            let Some(ann) = sample.part(g) else {
                missing = true;
                continue;
            };
            score.total += 1;
            if let Some((x, y)) = peak(i, g) {
                if ann.bbox.contains(x, y) {
                    score.correct += 1;
                }
            }
        }
        if missing {
            skipped += 1;
        }
    }
    let evaluated: Vec<f64> = parts
        .iter()
        .filter(|p| p.total > 0)
        .map(PartScore::score)
        .collect();
    if evaluated.is_empty() {
        return Err(Error::Empty("part annotations".into()));
    }
    let mean = evaluated.iter().sum::<f64>() / evaluated.len() as f64;
    Ok(PcpReport {
        parts,
        mean,
        skipped,
    })
}

/// PCP of the model: for each group, the peak of its highest-predicted
/// attribute's upsampled map must fall inside the part box.
pub fn pcp<T: Float>(
    params: &ModelParams<T>,
    bundle: &DatasetBundle,
    indices: &[usize],
    loss_cfg: &LossConfig,
) -> Result<PcpReport> {
    let (h, w) = bundle.spatial_size();
    let groups = bundle.schema.groups().to_vec();
    let any = [bundle.classes.all_ids()[0]];
    let cfg = LossConfig {
        zoom: false,
        ..*loss_cfg
    };
    let peaks: Vec<Result<Vec<(usize, usize)>>> =
        map_traces(params, bundle, indices, &any, &cfg, |_, t| {
            groups
                .iter()
                .map(|gr| {
                    let k = crate::model::group_argmax(t.attrs.data(), gr);
                    let up = upsample_to_input(&t.sim.slice_outer(k)?, h, w)?;
                    Ok(peak_xy(&up))
                })
                .collect()
        })?;
    let peaks = peaks.into_iter().collect::<Result<Vec<_>>>()?;
    let pos: std::collections::HashMap<usize, usize> =
        indices.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    pcp_from_peaks(bundle, indices, |i, g| Some(peaks[pos[&i]][g]))
}

/// Expected PCP of a uniformly random peak: the mean over parts of the
/// average box-area fraction.
pub fn chance_pcp(bundle: &DatasetBundle, indices: &[usize]) -> f64 {
    let (h, w) = bundle.spatial_size();
    let l = bundle.schema.l();
    let mut per = vec![(0.0, 0usize); l];
    for &i in indices {
        for ann in &bundle.samples[i].parts {
            per[ann.part].0 += ann.bbox.area() as f64 / (h * w) as f64;
            per[ann.part].1 += 1;
        }
    }
    let vals: Vec<f64> = per
        .iter()
        .filter(|p| p.1 > 0)
        .map(|p| p.0 / p.1 as f64)
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn to_bytes<T: Float>(map: &Tensor<T>) -> Vec<u8> {
    let d = map.data();
    let lo = d
        .iter()
        .copied()
        .fold(d[0], |a, b| if b < a { b } else { a });
    let hi = d.iter().copied().fold(d[0], T::max);
    let range = (hi - lo).to_f64();
    d.iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo).to_f64() / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary greyscale PGM of a min-max normalised `[H,W]` map. A constant map
/// is written as all zeros.
pub fn write_pgm<T: Float>(map: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(to_bytes(map));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Binary PPM of an interleaved RGB buffer.
pub fn write_ppm(rgb: &[u8], w: usize, h: usize, path: &Path) -> Result<()> {
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(rgb);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes, for each attribute of `attrs`, `attrNN_<name>.pgm` (the upsampled
/// map) and `attrNN_<name>.ppm` (the input with the peak box drawn in red).
/// `image` is the `[C,S,S]` model input; inputs that are not RGB images are
/// replaced by the heatmap itself as background.
pub fn export_heatmaps<T: Float>(
    trace: &ForwardTrace<T>,
    image: &Tensor<T>,
    attrs: &[usize],
    names: &[String],
    rho: f64,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, s) = (image.shape()[0], image.shape()[1]);
    let mut written = Vec::with_capacity(2 * attrs.len());
    for &k in attrs {
        let loc = localize(trace, k, s, rho)?;
        let stem = format!(
            "attr{:02}_{}",
            k + 1,
            sanitize(names.get(k).map_or("attribute", String::as_str))
        );
        let pgm = dir.join(format!("{stem}.pgm"));
        write_pgm(&loc.heatmap, &pgm)?;

        let grey = to_bytes(&loc.heatmap);
        let mut rgb = Vec::with_capacity(3 * s * s);
        for p in 0..s * s {
            for ch in 0..3 {
                let v = if c == 3 {
                    (image.data()[ch * s * s + p].to_f64().clamp(0.0, 1.0) * 255.0).round() as u8
                } else {
                    grey[p]
                };
                rgb.push(v);
            }
        }
        let b = loc.bbox;
        for y in b.y0..=b.y1 {
            for x in b.x0..=b.x1 {
                if x == b.x0 || x == b.x1 || y == b.y0 || y == b.y1 {
                    rgb[3 * (y * s + x)..3 * (y * s + x) + 3].copy_from_slice(&[255, 0, 0]);
                }
            }
        }
        let ppm = dir.join(format!("{stem}.ppm"));
        write_ppm(&rgb, s, s, &ppm)?;
        written.push(pgm);
        written.push(ppm);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_black() {
        let t = Tensor::full(&[3, 3], 0.4f32).unwrap();
        assert_eq!(to_bytes(&t), vec![0; 9]);
        let ramp = Tensor::new(vec![1, 3], vec![0.0f64, 0.5, 1.0]).unwrap();
        assert_eq!(to_bytes(&ramp), vec![0, 128, 255]);
    }

    #[test]
    fn peak_tie_is_first() {
        let t = Tensor::full(&[2, 2], 1.0f64).unwrap();
        assert_eq!(peak_xy(&t), (0, 0));
    }
}
