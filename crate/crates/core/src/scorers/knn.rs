use crate::bagkit::{BagDataset, InstanceDataset};
use crate::error::{Error, Result};
use crate::model::MilModel;
use crate::tensor::Element;

/// L2-normalised pooled representations of the training bags.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnBank {
    dim: usize,
    rows: Vec<f64>,
}

pub(crate) fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

impl KnnBank {
    /// Normalises and stores every row; a zero-norm row is a data error.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Dimension(format!("bank row {i} has length {}, expected {dim}", r.len())));
            }
            let unit = normalize(r)
                .ok_or_else(|| Error::Data(format!("bank row {i} has zero or non-finite norm")))?;
            flat.extend(unit);
        }
        Ok(Self { dim, rows: flat })
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.rows.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Euclidean distance from the normalised `query` to the `k`-th nearest
    /// row.
    pub fn kth_distance(&self, query: &[f64], k: usize) -> Result<f64> {
        if k == 0 || k > self.len() {
            return Err(Error::Parameter(format!(
                "knn_k = {k} outside 1..={} bank rows",
                self.len()
            )));
        }
        if query.len() != self.dim {
            return Err(Error::Dimension(format!(
                "query has length {}, bank rows have {}",
                query.len(),
                self.dim
            )));
        }
        let q = normalize(query).ok_or_else(|| Error::Data("query has zero or non-finite norm".into()))?;
        let mut d: Vec<f64> = (0..self.len()).map(|i| distance(&q, self.row(i))).collect();
        let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
        Ok(*kth)
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn build_knn_bank<T: Element>(model: &MilModel<T>, src: &InstanceDataset, bags: &BagDataset) -> Result<KnnBank> {
    if bags.is_empty() {
        return Err(Error::Data("KNN needs a non-empty training set".into()));
    }
    KnnBank::from_rows(&super::pooled_representations(model, src, bags)?)
}

/// Negated k-th nearest-neighbour distance, so larger means more ID.
pub fn score_knn<T: Element>(pooled: &[T], bank: &KnnBank, k: usize) -> Result<f64> {
    let q: Vec<f64> = pooled.iter().map(|v| v.as_f64()).collect();
    Ok(-bank.kth_distance(&q, k)?)
}
