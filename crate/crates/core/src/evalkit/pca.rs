use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::simenv::Variant;
use crate::{Error, Result};

/// Joint-LSTM hidden states of one rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenTrace {
    pub id: usize,
    pub variant: Variant,
    pub states: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// Unit principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component.
    pub explained: Vec<f64>,
    pub total_variance: f64,
    /// Per trace, per step, the coordinates on `components`.
    pub projections: Vec<Vec<Vec<f64>>>,
}

impl PcaResult {
    pub fn explained_ratio(&self) -> f64 {
        if self.total_variance > 0.0 {
            self.explained.iter().sum::<f64>() / self.total_variance
        } else {
            0.0
        }
    }
}

/// Below this total variance the data is treated as a single point.
const DEGENERATE_VARIANCE: f64 = 1e-18;

/// Projects every hidden state onto the top `dims` principal components of the
/// pooled, mean-centred states. Each component is oriented so that its
/// largest-magnitude loading is positive.
pub fn pca_hidden(traces: &[HiddenTrace], dims: usize) -> Result<PcaResult> {
    if traces.len() < 2 {
        return Err(Error::InvalidArgument("pca needs at least two traces".into()));
    }
    let width = traces[0].states.first().map(Vec::len).unwrap_or(0);
    if width == 0 || traces.iter().any(|t| t.states.iter().any(|s| s.len() != width)) {
        return Err(Error::InvalidArgument(
            "hidden states must share a non-zero width".into(),
        ));
    }
    if dims == 0 || dims > width {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {dims} of {width} dimensions"
        )));
    }
    let rows: Vec<&Vec<f32>> = traces.iter().flat_map(|t| &t.states).collect();
    let n = rows.len();
    let mut mean = vec![0.0; width];
    for r in &rows {
        for (m, &x) in mean.iter_mut().zip(r.iter()) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, width, |i, j| rows[i][j] as f64 - mean[j]);
    let cov = centred.transpose() * &centred / n as f64;
    let total_variance = cov.trace();

    let (components, explained) = if total_variance <= DEGENERATE_VARIANCE {
        log::warn!("hidden states have no variance; returning a zero projection");
        (vec![vec![0.0; width]; dims], vec![0.0; dims])
    } else {
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut comps = Vec::with_capacity(dims);
        let mut vals = Vec::with_capacity(dims);
        for &k in order.iter().take(dims) {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead =
                v.iter().copied().enumerate().fold(
                    (0, 0.0f64),
                    |best, (i, x)| if x.abs() > best.1.abs() { (i, x) } else { best },
                );
            if v[lead.0] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            comps.push(v);
            vals.push(eig.eigenvalues[k].max(0.0));
        }
        (comps, vals)
    };

    let projections = traces
        .iter()
        .map(|t| {
            t.states
                .iter()
                .map(|s| {
                    components
                        .iter()
                        .map(|c| c.iter().zip(s).zip(&mean).map(|((w, &x), m)| w * (x as f64 - m)).sum())
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(PcaResult {
        mean,
        components,
        explained,
        total_variance,
        projections,
    })
}
