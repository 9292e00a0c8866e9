//! Matrices as row-major nested JSON arrays.
//!
//! A matrix with rows but no columns is written as `[[], [], ...]` so its row
//! count survives a round trip. A `0×n` matrix is written as `[]` and reads
//! back as `0×0`; constructors that know the expected shape repair it with
//! [`fit_empty`].

use crate::linalg::Matrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix, String> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, Vec::len);
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != n_cols) {
        return Err(format!(
            "ragged matrix: row {i} has {} entries, expected {n_cols}",
            row.len()
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err("matrix entries must be finite".to_string());
    }
    Ok(Matrix::from_fn(n_rows, n_cols, |r, c| rows[r][c]))
}

/// Replaces an empty matrix by a `rows×cols` zero-size matrix of the right shape.
pub fn fit_empty(m: Matrix, rows: usize, cols: usize) -> Matrix {
    if m.is_empty() && (rows == 0 || cols == 0) {
        Matrix::zeros(rows, cols)
    } else {
        m
    }
}

pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
    to_rows(m).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
    let rows = Vec::<Vec<f64>>::deserialize(d)?;
    from_rows(&rows).map_err(serde::de::Error::custom)
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Option<Matrix>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Matrix>, D::Error> {
        match Option::<Vec<Vec<f64>>>::deserialize(d)? {
            Some(rows) => from_rows(&rows).map(Some).map_err(serde::de::Error::custom),
            None => Ok(None),
        }
    }
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[Matrix], s: S) -> Result<S::Ok, S::Error> {
        ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Matrix>, D::Error> {
        Vec::<Vec<Vec<f64>>>::deserialize(d)?
            .iter()
            .map(|rows| from_rows(rows).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_row_count_of_column_free_matrix() {
        let m = Matrix::zeros(3, 0);
        let json = serde_json::to_string(&to_rows(&m)).unwrap();
        assert_eq!(json, "[[],[],[]]");
        let back: Vec<Vec<f64>> = serde_json::from_str(&json).unwrap();
        assert_eq!(from_rows(&back).unwrap().shape(), (3, 0));
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn fit_empty_repairs_shape() {
        assert_eq!(fit_empty(Matrix::zeros(0, 0), 0, 3).shape(), (0, 3));
        assert_eq!(fit_empty(Matrix::zeros(0, 0), 2, 0).shape(), (2, 0));
        let m = Matrix::identity(2, 2);
        assert_eq!(fit_empty(m.clone(), 2, 2), m);
    }
}
