//! Dense layers shared by the backbone, the experts and the decoder.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Mat, Tape, Var};
use crate::{Error, Result};

/// `y = x·W + b` with `W` stored input-major (`fan_in × fan_out`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    #[serde(with = "mat_rows")]
    pub weight: Mat,
    #[serde(with = "mat_rows")]
    pub bias: Mat,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound)),
            bias: Mat::zeros((1, fan_out)),
        }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            weight: Mat::eye(width),
            bias: Mat::zeros((1, width)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        x.dot(&self.weight) + &self.bias
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.row(0).to_vec();
        for (xi, wrow) in x.iter().zip(self.weight.rows()) {
            for (o, w) in out.iter_mut().zip(wrow) {
                *o += xi * w;
            }
        }
        out
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.bias.dim() != (1, self.fan_out()) {
            return Err(Error::Dimension(format!(
                "{what}: bias is {:?}, expected (1, {})",
                self.bias.dim(),
                self.fan_out()
            )));
        }
        if self.weight.iter().chain(self.bias.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("{what}: non-finite parameter")));
        }
        Ok(())
    }

    pub(crate) fn leaves(&self, tape: &mut Tape) -> LinearVars {
        LinearVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let xw = tape.matmul(x, self.weight);
        tape.add_row(xw, self.bias)
    }
}

/// Checks that consecutive layers chain from `input` width to `output` width.
pub(crate) fn check_chain(layers: &[Linear], input: usize, output: usize, what: &str) -> Result<()> {
    let mut width = input;
    for (i, l) in layers.iter().enumerate() {
        if l.fan_in() != width {
            return Err(Error::Dimension(format!(
                "{what} layer {i}: expects width {}, got {width}",
                l.fan_in()
            )));
        }
        l.validate(&format!("{what} layer {i}"))?;
        width = l.fan_out();
    }
    if width != output {
        return Err(Error::Dimension(format!("{what}: output width {width}, expected {output}")));
    }
    Ok(())
}

/// Serializes a matrix as a list of rows.
pub mod mat_rows {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::tape::Mat;

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        (m.ncols(), rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let (cols, rows): (usize, Vec<Vec<f64>>) = Deserialize::deserialize(d)?;
        if rows.iter().any(|r| r.len() != cols) {
            return Err(D::Error::custom("ragged matrix"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Mat::from_shape_vec((rows.len(), cols), flat).map_err(D::Error::custom)
    }
}

/// Serializes a list of matrices, each as a list of rows.
pub mod mat_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::tape::Mat;

    #[derive(Serialize, Deserialize)]
    struct Rows(#[serde(with = "super::mat_rows")] Mat);

    pub fn serialize<S: Serializer>(ms: &[Mat], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(ms.iter().map(|m| Rows(m.clone())))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Mat>, D::Error> {
        let rows: Vec<Rows> = Deserialize::deserialize(d)?;
        Ok(rows.into_iter().map(|r| r.0).collect())
    }
}
