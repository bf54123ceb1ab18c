//! Serde helpers: matrices are written row-major as `{rows, cols, data}`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Matrix, Vector};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Matrix> for MatrixDoc {
    fn from(m: &Matrix) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixDoc {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatrixDoc {
    pub fn to_matrix(&self) -> Result<Matrix, String> {
        if self.rows * self.cols != self.data.len() {
            return Err(format!(
                "matrix declares {}x{} but carries {} entries",
                self.rows,
                self.cols,
                self.data.len()
            ));
        }
        Ok(Matrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

pub mod row_major {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        MatrixDoc::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        MatrixDoc::deserialize(d)?
            .to_matrix()
            .map_err(serde::de::Error::custom)
    }
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
