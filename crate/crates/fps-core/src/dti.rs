//! Classical diffusion-tensor pipeline: synthesize direction-encoded signals
//! from a tensor field, fit tensors back by log-linear least squares, and
//! derive the scalar maps (FA, MD, AD, RD) via symmetric eigendecomposition.

use crate::error::{FpsError, Result};

/// Diffusion directions and weightings; at least six non-coplanar directions
/// plus one b=0 measurement are required for a full tensor fit.
#[derive(Debug, Clone)]
pub struct GradientScheme {
    /// Unit direction per measurement; the b=0 entries may use any direction.
    pub directions: Vec<[f64; 3]>,
    /// b-value per measurement, s/mm^2.
    pub b_values: Vec<f64>,
}

impl GradientScheme {
    /// The standard six-direction scheme plus one b=0 measurement.
    pub fn default_six(b: f64) -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        GradientScheme {
            directions: vec![
                [0.0, 0.0, 1.0], // b = 0
                [s, s, 0.0],
                [s, 0.0, s],
                [0.0, s, s],
                [s, -s, 0.0],
                [s, 0.0, -s],
                [0.0, s, -s],
            ],
            b_values: vec![0.0, b, b, b, b, b, b],
        }
    }

    pub fn len(&self) -> usize {
        self.b_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b_values.is_empty()
    }

    pub fn includes_b0(&self) -> bool {
        self.b_values.iter().any(|&b| b == 0.0)
    }

    /// Design-matrix row of one measurement:
    /// `[1, -b gx^2, -b gy^2, -b gz^2, -2b gx gy, -2b gx gz, -2b gy gz]`.
    fn design_row(&self, k: usize) -> [f64; 7] {
        let [gx, gy, gz] = self.directions[k];
        let b = self.b_values[k];
        [
            1.0,
            -b * gx * gx,
            -b * gy * gy,
            -b * gz * gz,
            -2.0 * b * gx * gy,
            -2.0 * b * gx * gz,
            -2.0 * b * gy * gz,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.directions.len() != self.b_values.len() {
            return Err(FpsError::Scheme(format!(
                "{} directions for {} b-values",
                self.directions.len(),
                self.b_values.len()
            )));
        }
        if self.len() < 7 {
            return Err(FpsError::Scheme(format!(
                "need >= 7 measurements (6 directions + b0), got {}",
                self.len()
            )));
        }
        if !self.includes_b0() {
            return Err(FpsError::Scheme("scheme lacks a b=0 measurement".into()));
        }
        for (k, d) in self.directions.iter().enumerate() {
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(FpsError::Scheme(format!(
                    "direction {k} has norm {norm}, expected 1"
                )));
            }
        }
        // full rank of the design confirms the directions are non-coplanar
        let rows: Vec<[f64; 7]> = (0..self.len()).map(|k| self.design_row(k)).collect();
        let mut gram = [[0.0f64; 7]; 7];
        for row in &rows {
            for i in 0..7 {
                for j in 0..7 {
                    gram[i][j] += row[i] * row[j];
                }
            }
        }
        // scale-normalize before the pivot test so b ~ 1000 does not mask
        // genuine rank deficiency
        let mut scale = [0.0f64; 7];
        for (i, s) in scale.iter_mut().enumerate() {
            *s = gram[i][i].sqrt();
            // an all-zero column is already rank-revealing; leave it at 0
            if *s < 1e-150 {
                *s = 1.0;
            }
        }
        let mut normed = [[0.0f64; 7]; 7];
        for i in 0..7 {
            for j in 0..7 {
                normed[i][j] = gram[i][j] / (scale[i] * scale[j]);
            }
        }
        if rank7(&normed) < 7 {
            return Err(FpsError::Scheme(
                "rank-deficient design: directions are coplanar or degenerate".into(),
            ));
        }
        Ok(())
    }
}

fn rank7(m: &[[f64; 7]; 7]) -> usize {
    let mut a = *m;
    let mut rank = 0;
    for col in 0..7 {
        let pivot = (rank..7).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap());
        let Some(p) = pivot else { break };
        if a[p][col].abs() < 1e-9 {
            continue;
        }
        a.swap(rank, p);
        for row in 0..7 {
            if row != rank {
                let f = a[row][col] / a[rank][col];
                for k in 0..7 {
                    a[row][k] -= f * a[rank][k];
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Symmetric diffusion tensor, mm^2/s.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiffusionTensor {
    pub dxx: f64,
    pub dyy: f64,
    pub dzz: f64,
    pub dxy: f64,
    pub dxz: f64,
    pub dyz: f64,
}

impl DiffusionTensor {
    pub fn isotropic(d: f64) -> Self {
        DiffusionTensor { dxx: d, dyy: d, dzz: d, ..Default::default() }
    }

    pub fn quadratic_form(&self, g: &[f64; 3]) -> f64 {
        self.dxx * g[0] * g[0]
            + self.dyy * g[1] * g[1]
            + self.dzz * g[2] * g[2]
            + 2.0 * self.dxy * g[0] * g[1]
            + 2.0 * self.dxz * g[0] * g[2]
            + 2.0 * self.dyz * g[1] * g[2]
    }

    pub fn trace(&self) -> f64 {
        self.dxx + self.dyy + self.dzz
    }

    fn to_matrix(self) -> [[f64; 3]; 3] {
        [
            [self.dxx, self.dxy, self.dxz],
            [self.dxy, self.dyy, self.dyz],
            [self.dxz, self.dyz, self.dzz],
        ]
    }
}

/// Per-voxel signals for every scheme measurement:
/// `S_k = s0 * exp(-b_k * g_k' D g_k)`.
pub fn synth_dwi(
    tensors: &[DiffusionTensor],
    scheme: &GradientScheme,
    s0: &[f64],
) -> Result<Vec<Vec<f64>>> {
    scheme.validate()?;
    if tensors.len() != s0.len() {
        return Err(FpsError::shape(
            format!("{} voxels", tensors.len()),
            format!("{} s0 values", s0.len()),
        ));
    }
    if s0.iter().any(|&v| !(v > 0.0)) {
        return Err(FpsError::InvalidInput("s0 must be positive".into()));
    }
    let mut out = Vec::with_capacity(scheme.len());
    for k in 0..scheme.len() {
        let g = scheme.directions[k];
        let b = scheme.b_values[k];
        out.push(
            tensors
                .iter()
                .zip(s0.iter())
                .map(|(t, &s)| s * (-b * t.quadratic_form(&g)).exp())
                .collect(),
        );
    }
    Ok(out)
}

/// Tensor fit of one voxel's measurements, or `None` for voxels flagged out
/// because of non-positive signals.
#[derive(Debug, Clone)]
pub struct TensorFit {
    pub tensors: Vec<Option<(DiffusionTensor, f64)>>,
    /// Voxel indices excluded from the fit.
    pub masked_out: Vec<usize>,
}

/// Log-linear least-squares fit per voxel. Voxels with any non-positive
/// signal are masked out and flagged rather than fitted.
pub fn fit_tensor(signals: &[Vec<f64>], scheme: &GradientScheme) -> Result<TensorFit> {
    scheme.validate()?;
    if signals.len() != scheme.len() {
        return Err(FpsError::shape(
            format!("{} measurements", scheme.len()),
            format!("{}", signals.len()),
        ));
    }
    let voxels = signals[0].len();
    if signals.iter().any(|s| s.len() != voxels) {
        return Err(FpsError::shape(
            format!("{voxels} voxels in every measurement"),
            "ragged signal stack".to_string(),
        ));
    }
    let rows: Vec<[f64; 7]> = (0..scheme.len()).map(|k| scheme.design_row(k)).collect();
    // normal-equation matrix is voxel independent
    let mut ata = [[0.0f64; 7]; 7];
    for row in &rows {
        for i in 0..7 {
            for j in 0..7 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }

    let mut tensors = Vec::with_capacity(voxels);
    let mut masked_out = Vec::new();
    for v in 0..voxels {
        if (0..scheme.len()).any(|k| !(signals[k][v] > 0.0)) {
            masked_out.push(v);
            tensors.push(None);
            continue;
        }
        let mut atb = [0.0f64; 7];
        for (k, row) in rows.iter().enumerate() {
            let logs = signals[k][v].ln();
            for i in 0..7 {
                atb[i] += row[i] * logs;
            }
        }
        let sol = solve7(&ata, &atb)?;
        tensors.push(Some((
            DiffusionTensor {
                dxx: sol[1],
                dyy: sol[2],
                dzz: sol[3],
                dxy: sol[4],
                dxz: sol[5],
                dyz: sol[6],
            },
            sol[0].exp(),
        )));
    }
    Ok(TensorFit { tensors, masked_out })
}

fn solve7(a: &[[f64; 7]; 7], b: &[f64; 7]) -> Result<[f64; 7]> {
    let mut m = [[0.0f64; 8]; 7];
    for i in 0..7 {
        m[i][..7].copy_from_slice(&a[i]);
        m[i][7] = b[i];
    }
    for col in 0..7 {
        let pivot = (col..7)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        if m[pivot][col].abs() < 1e-300 {
            return Err(FpsError::Scheme("singular normal equations".into()));
        }
        m.swap(col, pivot);
        for row in 0..7 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..8 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let mut out = [0.0f64; 7];
    for i in 0..7 {
        out[i] = m[i][7] / m[i][i];
    }
    Ok(out)
}

/// Sorted eigenvalues (descending) and orthonormal eigenvectors (rows) of a
/// symmetric tensor, by cyclic Jacobi rotation to off-diagonal norm 1e-12.
pub fn eig3_symmetric(t: &DiffusionTensor) -> Result<([f64; 3], [[f64; 3]; 3])> {
    let vals = [t.dxx, t.dyy, t.dzz, t.dxy, t.dxz, t.dyz];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(FpsError::InvalidInput("non-finite tensor entries".into()));
    }
    let mut a = t.to_matrix();
    let mut v = [[0.0f64; 3]; 3];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..64 {
        let off = (a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]).sqrt();
        if off < 1e-12 {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
            let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
            let t_rot = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t_rot * t_rot + 1.0).sqrt();
            let s = t_rot * c;
            // rotate rows/cols p and q
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for k in 0..3 {
                let vkp = v[k][p];
                let vkq = v[k][q];
                v[k][p] = c * vkp - s * vkq;
                v[k][q] = s * vkp + c * vkq;
            }
        }
    }
    let mut pairs: Vec<(f64, [f64; 3])> = (0..3)
        .map(|i| (a[i][i], [v[0][i], v[1][i], v[2][i]]))
        .collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let eigenvalues = [pairs[0].0, pairs[1].0, pairs[2].0];
    let eigenvectors = [pairs[0].1, pairs[1].1, pairs[2].1];
    Ok((eigenvalues, eigenvectors))
}

/// Scalar maps from sorted eigenvalues. FA is clamped to [0, 1] and defined
/// as 0 for the all-zero tensor; negative eigenvalues pass through raw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtiMaps {
    pub fa: f64,
    pub md: f64,
    pub ad: f64,
    pub rd: f64,
}

pub fn dti_maps(eigenvalues: &[f64; 3]) -> DtiMaps {
    let [l1, l2, l3] = *eigenvalues;
    let md = (l1 + l2 + l3) / 3.0;
    let ad = l1;
    let rd = (l2 + l3) / 2.0;
    let num = (l1 - md).powi(2) + (l2 - md).powi(2) + (l3 - md).powi(2);
    let den = l1 * l1 + l2 * l2 + l3 * l3;
    let fa = if den == 0.0 {
        0.0
    } else {
        ((1.5 * num / den).sqrt()).clamp(0.0, 1.0)
    };
    DtiMaps { fa, md, ad, rd }
}
