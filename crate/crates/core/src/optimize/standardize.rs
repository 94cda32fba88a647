use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;
use crate::types::FeatureVector;

/// Column-wise affine map to mean 0 and variance 1, fitted on training data
/// and stored with every fitted policy so it can be replayed at scoring time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviations; constant columns get 1.
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[FeatureVector]) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot standardize zero rows".into()))?;
        let p = first.len();
        let n = features.len() as f64;
        let mut mean = Vec::with_capacity(p);
        let mut scale = Vec::with_capacity(p);
        let mut col = vec![0.0; features.len()];
        for j in 0..p {
            for (c, x) in col.iter_mut().zip(features) {
                *c = x[j];
            }
            let m = numeric::mean(&col);
            let sq: Vec<f64> = col.iter().map(|v| (v - m) * (v - m)).collect();
            let sd = (numeric::pairwise_sum(&sq) / n).sqrt();
            mean.push(m);
            scale.push(if sd > 1e-12 { sd } else { 1.0 });
        }
        Ok(Self { mean, scale })
    }

    pub fn identity(p: usize) -> Self {
        Self {
            mean: vec![0.0; p],
            scale: vec![1.0; p],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn transform_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (v, (m, s))) in out.iter_mut().zip(x.iter().zip(self.mean.iter().zip(&self.scale))) {
            *o = (v - m) / s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizes_and_handles_constant_columns() {
        let rows: Vec<FeatureVector> = [[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]]
            .iter()
            .map(|r| FeatureVector::new(r.to_vec()).unwrap())
            .collect();
        let s = Standardizer::fit(&rows).unwrap();
        assert_eq!(s.mean, vec![3.0, 5.0]);
        assert_eq!(s.scale[1], 1.0);
        let z: Vec<Vec<f64>> = rows.iter().map(|r| s.transform(r)).collect();
        let var: f64 = z.iter().map(|r| r[0] * r[0]).sum::<f64>() / 3.0;
        assert!((var - 1.0).abs() < 1e-12);
        assert_eq!(z[0][1], 0.0);
    }
}
