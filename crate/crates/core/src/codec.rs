//! Inference-side tokenization and interpretability tools: per-token
//! templates, blendshape mesh decoding, deformation heatmaps and the
//! displacement diagnostics used to audit codeword redundancy.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{tokenize_batch, Hyperparams, ModelParams};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

pub const BLENDSHAPE_MAGIC: [u8; 4] = *b"DFEB";
pub const BLENDSHAPE_VERSION: u32 = 1;

/// Neutral template mesh plus per-coefficient vertex-offset bases; turns
/// an expression vector into a 3-D mesh by pure linear blending.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeModel {
    /// [N, 3] vertex positions of the neutral mesh.
    pub template: Tensor,
    /// [dim, N, 3] per-coefficient vertex offsets.
    pub basis: Tensor,
}

impl BlendshapeModel {
    pub fn vertex_count(&self) -> usize {
        self.template.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.basis.shape[0]
    }

    /// Synthetic stand-in for a production face basis: vertices on a unit
    /// Fibonacci sphere, each coefficient displacing a localized patch
    /// radially with linear falloff. Deterministic in the seed.
    pub fn synthetic(n_vertices: usize, dim: usize, seed: u64) -> Self {
        let mut rng = crate::rng::substream(seed, crate::rng::STREAM_BLENDSHAPES);
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        let mut template = Tensor::zeros(vec![n_vertices, 3]);
        for i in 0..n_vertices {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n_vertices as f64;
            let r = (1.0 - y * y).sqrt();
            let theta = golden * i as f64;
            let row = template.row_mut(i);
            row[0] = r * theta.cos();
            row[1] = y;
            row[2] = r * theta.sin();
        }
        let radius = 0.35;
        let noise = Normal::new(0.0, 0.003).expect("valid std");
        let mut basis = Tensor::zeros(vec![dim, n_vertices, 3]);
        for j in 0..dim {
            let center = rng.random_range(0..n_vertices);
            let c = template.row(center).to_vec();
            let magnitude = rng.random_range(0.02..0.06);
            for v in 0..n_vertices {
                let p = template.row(v);
                let dist = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2))
                    .sqrt();
                if dist < radius {
                    let falloff = magnitude * (1.0 - dist / radius);
                    let base = (j * n_vertices + v) * 3;
                    // radial displacement plus a little tangential noise
                    basis.data[base] = p[0] * falloff + noise.sample(&mut rng);
                    basis.data[base + 1] = p[1] * falloff + noise.sample(&mut rng);
                    basis.data[base + 2] = p[2] * falloff + noise.sample(&mut rng);
                }
            }
        }
        BlendshapeModel { template, basis }
    }

    /// Expression-induced vertex offsets: sum_j psi_j * B_j, [N, 3].
    /// Zero input gives exactly zero offsets.
    pub fn expression_offsets(&self, psi: &[f64]) -> Result<Tensor> {
        if psi.len() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: psi.len() });
        }
        let n = self.vertex_count();
        let mut out = Tensor::zeros(vec![n, 3]);
        for (j, &w) in psi.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let basis_j = &self.basis.data[j * n * 3..(j + 1) * n * 3];
            for (o, &b) in out.data.iter_mut().zip(basis_j) {
                *o += w * b;
            }
        }
        Ok(out)
    }

    /// Deformed mesh M = template + expression offsets.
    pub fn deform(&self, psi: &[f64]) -> Result<Tensor> {
        let mut out = self.expression_offsets(psi)?;
        for (o, &t) in out.data.iter_mut().zip(&self.template.data) {
            *o += t;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&BLENDSHAPE_MAGIC)?;
        w.write_all(&BLENDSHAPE_VERSION.to_le_bytes())?;
        w.write_all(&(self.vertex_count() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for &v in &self.template.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for &v in &self.basis.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = bytes.as_slice();
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if magic != BLENDSHAPE_MAGIC {
            return Err(Error::BadMagic { expected: BLENDSHAPE_MAGIC, got: magic });
        }
        let version = read_u32(&mut r)?;
        if version != BLENDSHAPE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: BLENDSHAPE_VERSION,
            });
        }
        let n = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        if n == 0 || dim == 0 || n.saturating_mul(dim) > (1 << 28) {
            return Err(Error::Corrupt(format!("implausible blendshape header: N={n} dim={dim}")));
        }
        let mut template = vec![0f32; n * 3];
        read_f32_into(&mut r, &mut template)?;
        let mut basis = vec![0f32; dim * n * 3];
        read_f32_into(&mut r, &mut basis)?;
        Ok(BlendshapeModel {
            template: Tensor::from_f32(vec![n, 3], &template),
            basis: Tensor::from_f32(vec![dim, n, 3], &basis),
        })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Corrupt("unexpected end of file".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32_into(r: &mut impl Read, out: &mut [f32]) -> Result<()> {
    let mut bytes = vec![0u8; out.len() * 4];
    read_exact(r, &mut bytes)?;
    for (o, chunk) in out.iter_mut().zip(bytes.chunks_exact(4)) {
        *o = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapNorm {
    /// Normalize by the maximum vertex distance.
    Max,
    /// Normalize by the 99th-percentile distance; resists single-vertex
    /// outliers.
    P99,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapResult {
    /// Per-vertex Euclidean distance to the neutral mesh.
    pub distances: Vec<f64>,
    /// Normalization constant the colors were computed with.
    pub scale: f64,
    /// Per-vertex RGB: t -> (255 t, 0, 255 (1 - t)).
    pub colors: Vec<[u8; 3]>,
}

/// Per-vertex deformation distances against the neutral (zero-expression)
/// mesh, colormapped blue (static) to red (max displacement). A fully
/// neutral input maps 0/0 to 0: all blue.
pub fn heatmap(psi: &[f64], bm: &BlendshapeModel, norm: HeatmapNorm) -> Result<HeatmapResult> {
    let offsets = bm.expression_offsets(psi)?;
    let n = bm.vertex_count();
    let mut distances = Vec::with_capacity(n);
    for v in 0..n {
        let row = offsets.row(v);
        distances.push((row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt());
    }
    let scale = match norm {
        HeatmapNorm::Max => distances.iter().cloned().fold(0.0, f64::max),
        HeatmapNorm::P99 => {
            let mut sorted = distances.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
            let idx = ((n as f64) * 0.99).ceil() as usize;
            sorted[idx.min(n - 1)]
        }
    };
    let colors = distances
        .iter()
        .map(|&d| {
            let t = if scale > 0.0 { (d / scale).min(1.0) } else { 0.0 };
            [
                (255.0 * t).round() as u8,
                0,
                (255.0 * (1.0 - t)).round() as u8,
            ]
        })
        .collect();
    Ok(HeatmapResult { distances, scale, colors })
}

/// ASCII PLY with per-vertex uchar RGB.
pub fn write_ply(path: impl AsRef<Path>, vertices: &Tensor, colors: &[[u8; 3]]) -> Result<()> {
    let n = vertices.shape[0];
    assert_eq!(colors.len(), n, "color count must match vertex count");
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {n}")?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "property uchar red")?;
    writeln!(w, "property uchar green")?;
    writeln!(w, "property uchar blue")?;
    writeln!(w, "end_header")?;
    for v in 0..n {
        let row = vertices.row(v);
        writeln!(
            w,
            "{} {} {} {} {} {}",
            row[0] as f32, row[1] as f32, row[2] as f32, colors[v][0], colors[v][1], colors[v][2]
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Single-code expression template from a checkpointed model.
pub fn token_template(params: &ModelParams, k: usize, include_bias: bool) -> Result<Vec<f64>> {
    params.dec.token_template(&params.codebook, k, include_bias)
}

/// Tokenizes feature rows in streaming chunks, reporting each row's token
/// sequence to `sink` in input order.
pub fn tokenize_rows<I>(
    params: &ModelParams,
    hp: &Hyperparams,
    rows: I,
    mut sink: impl FnMut(String, &[usize]) -> Result<()>,
) -> Result<usize>
where
    I: Iterator<Item = Result<(String, Vec<f64>)>>,
{
    const CHUNK: usize = 256;
    let mut ids: Vec<String> = Vec::with_capacity(CHUNK);
    let mut buf: Vec<f64> = Vec::with_capacity(CHUNK * hp.input_dim);
    let mut total = 0usize;
    let mut flush = |ids: &mut Vec<String>, buf: &mut Vec<f64>| -> Result<()> {
        if ids.is_empty() {
            return Ok(());
        }
        let x = Tensor::new(vec![ids.len(), hp.input_dim], std::mem::take(buf));
        let tokens = tokenize_batch(params, hp, &x)?;
        for (i, id) in ids.drain(..).enumerate() {
            sink(id, &tokens[i * hp.stages..(i + 1) * hp.stages])?;
        }
        Ok(())
    };
    for row in rows {
        let (id, features) = row?;
        if features.len() != hp.input_dim {
            return Err(Error::DimMismatch { expected: hp.input_dim, got: features.len() });
        }
        ids.push(id);
        buf.extend_from_slice(&features);
        total += 1;
        if ids.len() == CHUNK {
            flush(&mut ids, &mut buf)?;
        }
    }
    flush(&mut ids, &mut buf)?;
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RedundancyReport {
    pub avg_dot: f64,
    pub avg_cosine: f64,
    /// Pairs excluded from the cosine average because one side had zero
    /// displacement.
    pub cosine_excluded: usize,
}

/// Mean pairwise dot product and cosine similarity between the full-mesh
/// displacement vectors of all codewords.
pub fn displacement_redundancy(
    params: &ModelParams,
    bm: &BlendshapeModel,
    include_bias: bool,
) -> Result<RedundancyReport> {
    let k = params.codebook.len();
    let displacements: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let psi = token_template(params, i, include_bias)?;
            Ok(bm.expression_offsets(&psi)?.data)
        })
        .collect::<Result<_>>()?;
    let norms: Vec<f64> = displacements
        .iter()
        .map(|u| u.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut dot_sum = 0.0;
    let mut cos_sum = 0.0;
    let mut cos_pairs = 0usize;
    let mut excluded = 0usize;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in (i + 1)..k {
            let d: f64 = displacements[i].iter().zip(&displacements[j]).map(|(a, b)| a * b).sum();
            dot_sum += d;
            pairs += 1;
            if norms[i] > 0.0 && norms[j] > 0.0 {
                cos_sum += d / (norms[i] * norms[j]);
                cos_pairs += 1;
            } else {
                excluded += 1;
            }
        }
    }
    Ok(RedundancyReport {
        avg_dot: dot_sum / pairs.max(1) as f64,
        avg_cosine: if cos_pairs > 0 { cos_sum / cos_pairs as f64 } else { 0.0 },
        cosine_excluded: excluded,
    })
}

/// Fraction of vertices whose displacement exceeds each threshold,
/// averaged over all codewords. Non-increasing in the threshold by
/// construction.
pub fn displacement_percentiles(
    params: &ModelParams,
    bm: &BlendshapeModel,
    thresholds: &[f64],
    include_bias: bool,
) -> Result<Vec<(f64, f64)>> {
    let k = params.codebook.len();
    let n = bm.vertex_count() as f64;
    let mut fractions = vec![0.0; thresholds.len()];
    for code in 0..k {
        let psi = token_template(params, code, include_bias)?;
        let offsets = bm.expression_offsets(&psi)?;
        let mut dists: Vec<f64> = Vec::with_capacity(bm.vertex_count());
        for v in 0..bm.vertex_count() {
            let row = offsets.row(v);
            dists.push((row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt());
        }
        for (fi, &thr) in thresholds.iter().enumerate() {
            let count = dists.iter().filter(|&&d| d > thr).count();
            fractions[fi] += count as f64 / n;
        }
    }
    Ok(thresholds
        .iter()
        .zip(fractions)
        .map(|(&t, f)| (t, f / k as f64))
        .collect())
}

/// Loads the model a checkpoint describes, for codec-level entry points.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(ModelParams, Hyperparams)> {
    let params = ck.to_model()?;
    Ok((params, ck.hp.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, DecoderParams};
    use crate::rng::{substream, STREAM_INIT};
    use crate::rvq::Codebook;
    use rand::Rng;

    fn bm() -> BlendshapeModel {
        BlendshapeModel::synthetic(128, 10, 7)
    }

    #[test]
    fn zero_expression_is_the_template_exactly() {
        let bm = bm();
        let mesh = bm.deform(&vec![0.0; 10]).unwrap();
        assert_eq!(mesh, bm.template);
    }

    #[test]
    fn unit_vector_reproduces_one_basis_row() {
        let bm = bm();
        let mut psi = vec![0.0; 10];
        psi[3] = 1.0;
        let offsets = bm.expression_offsets(&psi).unwrap();
        let n = bm.vertex_count();
        let expect = &bm.basis.data[3 * n * 3..4 * n * 3];
        assert_eq!(&offsets.data[..], expect);
    }

    #[test]
    fn deform_superposition_is_exact_on_dyadic_inputs() {
        // dyadic basis entries and weights make every f64 op exact, so
        // linearity holds bitwise rather than approximately
        let n = 16;
        let dim = 4;
        let mut rng = substream(3, STREAM_INIT);
        let mut dyadic = |scale: i32| -> f64 {
            let v: i32 = rng.random_range(-(1 << 10)..(1 << 10));
            v as f64 / f64::from(1 << 10) * f64::from(scale)
        };
        let template = Tensor::zeros(vec![n, 3]);
        let mut basis = Tensor::zeros(vec![dim, n, 3]);
        for v in basis.data.iter_mut() {
            *v = dyadic(1);
        }
        let bm = BlendshapeModel { template, basis };
        let a: Vec<f64> = (0..dim).map(|_| dyadic(2)).collect();
        let b: Vec<f64> = (0..dim).map(|_| dyadic(2)).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let da = bm.expression_offsets(&a).unwrap();
        let db = bm.expression_offsets(&b).unwrap();
        let dsum = bm.expression_offsets(&sum).unwrap();
        for i in 0..n * 3 {
            assert_eq!(dsum.data[i], da.data[i] + db.data[i]);
        }
    }

    #[test]
    fn deform_superposition_close_on_random_inputs() {
        let bm = bm();
        let mut rng = substream(9, STREAM_INIT);
        for _ in 0..20 {
            let a: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let da = bm.expression_offsets(&a).unwrap();
            let db = bm.expression_offsets(&b).unwrap();
            let dsum = bm.expression_offsets(&sum).unwrap();
            for i in 0..dsum.numel() {
                let want = da.data[i] + db.data[i];
                assert!((dsum.data[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn heatmap_of_neutral_is_all_blue_zeros() {
        let bm = bm();
        let hm = heatmap(&vec![0.0; 10], &bm, HeatmapNorm::Max).unwrap();
        assert!(hm.distances.iter().all(|&d| d == 0.0));
        assert!(hm.colors.iter().all(|c| *c == [0, 0, 255]));
    }

    #[test]
    fn heatmap_single_vertex_case_and_endpoints() {
        // one coefficient displaces exactly one vertex by a unit offset
        let n = 8;
        let template = Tensor::zeros(vec![n, 3]);
        let mut basis = Tensor::zeros(vec![1, n, 3]);
        basis.data[5 * 3] = 1.0; // vertex 5, x direction
        let bm = BlendshapeModel { template, basis };
        let hm = heatmap(&[-0.75], &bm, HeatmapNorm::Max).unwrap();
        for v in 0..n {
            if v == 5 {
                assert!((hm.distances[v] - 0.75).abs() < 1e-15);
                assert_eq!(hm.colors[v], [255, 0, 0]); // max -> pure red
            } else {
                assert_eq!(hm.distances[v], 0.0);
                assert_eq!(hm.colors[v], [0, 0, 255]); // zero -> pure blue
            }
        }
    }

    #[test]
    fn blendshape_file_roundtrip_and_errors() {
        let bm = bm();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dfeb");
        bm.save(&path).unwrap();
        let back = BlendshapeModel::load(&path).unwrap();
        assert_eq!(back.vertex_count(), bm.vertex_count());
        assert_eq!(back.dim(), bm.dim());
        // f32 storage: values equal after one f32 roundtrip
        for (a, b) in bm.template.data.iter().zip(&back.template.data) {
            assert_eq!(*a as f32, *b as f32);
        }

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(BlendshapeModel::load(&path), Err(Error::BadMagic { .. })));

        bytes[0] = b'D';
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(BlendshapeModel::load(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn identical_displacements_have_cosine_one() {
        // two codes with identical rows, decoder passes them through
        let entries = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let params_dec = DecoderParams {
            w: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            b: Tensor::zeros(vec![2]),
        };
        let mut rng = substream(3, STREAM_INIT);
        let hp = Hyperparams {
            input_dim: 2,
            tokens: 1,
            token_dim: 2,
            hidden: 4,
            layers: 1,
            heads: 1,
            latent_dim: 2,
            codebook_size: 2,
            stages: 1,
            ..Hyperparams::default()
        };
        let mut params = init_params(&hp, &mut rng);
        params.dec = params_dec;
        params.codebook = Codebook::new(entries);
        let bm = BlendshapeModel::synthetic(64, 2, 5);
        let rep = displacement_redundancy(&params, &bm, true).unwrap();
        assert!((rep.avg_cosine - 1.0).abs() < 1e-12);
        assert_eq!(rep.cosine_excluded, 0);
        // identical vectors: dot == squared norm > 0
        assert!(rep.avg_dot > 0.0);
    }

    #[test]
    fn orthogonal_displacements_have_zero_dot_and_cosine() {
        // basis rows touch disjoint vertices, so displacement vectors of
        // distinct single-coefficient templates are orthogonal
        let n = 6;
        let template = Tensor::zeros(vec![n, 3]);
        let mut basis = Tensor::zeros(vec![2, n, 3]);
        basis.data[0] = 1.0; // coeff 0 -> vertex 0 x
        basis.data[(n + 1) * 3 + 1] = 1.0; // coeff 1 -> vertex 1 y
        let bm = BlendshapeModel { template, basis };
        let hp = Hyperparams {
            input_dim: 2,
            tokens: 1,
            token_dim: 2,
            hidden: 4,
            layers: 1,
            heads: 1,
            latent_dim: 2,
            codebook_size: 2,
            stages: 1,
            ..Hyperparams::default()
        };
        let mut rng = substream(8, STREAM_INIT);
        let mut params = init_params(&hp, &mut rng);
        params.dec = DecoderParams {
            w: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            b: Tensor::zeros(vec![2]),
        };
        params.codebook = Codebook::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let rep = displacement_redundancy(&params, &bm, true).unwrap();
        assert_eq!(rep.avg_dot, 0.0);
        assert_eq!(rep.avg_cosine, 0.0);
        assert_eq!(rep.cosine_excluded, 0);
    }

    #[test]
    fn percentile_curve_is_monotone_and_bounded() {
        let hp = Hyperparams {
            input_dim: 10,
            tokens: 2,
            token_dim: 5,
            hidden: 8,
            layers: 1,
            heads: 2,
            latent_dim: 6,
            codebook_size: 8,
            stages: 2,
            ..Hyperparams::default()
        };
        let mut rng = substream(4, STREAM_INIT);
        let params = init_params(&hp, &mut rng);
        let bm = BlendshapeModel::synthetic(128, 10, 3);
        let thresholds: Vec<f64> = (0..20).map(|i| i as f64 * 0.002).collect();
        let curve = displacement_percentiles(&params, &bm, &thresholds, true).unwrap();
        let mut prev = f64::INFINITY;
        for &(_, frac) in &curve {
            assert!(frac <= prev + 1e-15);
            assert!((0.0..=1.0).contains(&frac));
            prev = frac;
        }
        // beyond the max displacement the fraction is exactly zero
        let big = displacement_percentiles(&params, &bm, &[1e6], true).unwrap();
        assert_eq!(big[0].1, 0.0);
    }

    #[test]
    fn tokenize_rows_streams_in_order_with_duplicates() {
        let hp = Hyperparams {
            input_dim: 10,
            tokens: 2,
            token_dim: 5,
            hidden: 8,
            layers: 1,
            heads: 2,
            latent_dim: 6,
            codebook_size: 8,
            stages: 2,
            ..Hyperparams::default()
        };
        let mut rng = substream(6, STREAM_INIT);
        let params = init_params(&hp, &mut rng);
        let row: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows: Vec<crate::error::Result<(String, Vec<f64>)>> = vec![
            Ok(("a".into(), row.clone())),
            Ok(("b".into(), row.clone())),
        ];
        let mut seen = Vec::new();
        let n = tokenize_rows(&params, &hp, rows.into_iter(), |id, toks| {
            seen.push((id, toks.to_vec()));
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 2);
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[0].1, seen[1].1, "duplicate rows tokenize identically");
        // empty input -> empty table
        let none: Vec<crate::error::Result<(String, Vec<f64>)>> = Vec::new();
        let n = tokenize_rows(&params, &hp, none.into_iter(), |_, _| Ok(())).unwrap();
        assert_eq!(n, 0);
    }
}
