//! JSON representation of dense matrices: `{"rows": r, "cols": c, "data": [[row-major]]}`.

use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

use crate::linalg::Mat;

#[derive(Serialize, Deserialize)]
struct Repr {
    rows: usize,
    cols: usize,
    data: Vec<Vec<f64>>,
}

fn to_repr(m: &Mat) -> Repr {
    Repr {
        rows: m.nrows(),
        cols: m.ncols(),
        data: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
    }
}

fn from_repr(r: Repr) -> Result<Mat, String> {
    if r.data.len() != r.rows {
        return Err(format!("matrix declares {} rows but has {}", r.rows, r.data.len()));
    }
    if let Some((i, row)) = r.data.iter().enumerate().find(|(_, row)| row.len() != r.cols) {
        return Err(format!("matrix row {i} has {} entries, expected {}", row.len(), r.cols));
    }
    if r.data.iter().flatten().any(|x| !x.is_finite()) {
        return Err("matrix contains a non-finite entry".into());
    }
    Ok(Mat::from_fn(r.rows, r.cols, |i, j| r.data[i][j]))
}

pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
    to_repr(m).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
    from_repr(Repr::deserialize(d)?).map_err(D::Error::custom)
}

/// Same representation for a list of matrices.
pub mod list {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[Mat], s: S) -> Result<S::Ok, S::Error> {
        ms.iter().map(to_repr).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Mat>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(|r| from_repr(r).map_err(D::Error::custom))
            .collect()
    }
}
