use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One dataset: inputs `x: [N, D]`, outputs `y: [N, P]` and an optional
/// context mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Task<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub mask: Option<Vec<bool>>,
}

impl<T: Scalar> Task<T> {
    pub fn new(x: Tensor<T>, y: Tensor<T>, mask: Option<Vec<bool>>) -> Result<Self> {
        let (n, _) = x.dims2("Task::new")?;
        let (ny, _) = y.dims2("Task::new")?;
        if n != ny {
            return Err(dim_err("Task::new", format!("{n} inputs, {ny} outputs")));
        }
        if let Some(m) = &mask {
            if m.len() != n {
                return Err(dim_err("Task::new", format!("mask of {} for {n} rows", m.len())));
            }
        }
        Ok(Self { x, y, mask })
    }

    /// 1-D inputs and outputs from plain slices.
    pub fn from_xy(x: &[f64], y: &[f64]) -> Result<Self> {
        Self::new(
            Tensor::from_f64(vec![x.len(), 1], x)?,
            Tensor::from_f64(vec![y.len(), 1], y)?,
            None,
        )
    }

    pub fn empty(x_dim: usize, y_dim: usize) -> Self {
        Self {
            x: Tensor::zeros(&[0, x_dim]),
            y: Tensor::zeros(&[0, y_dim]),
            mask: None,
        }
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn y_dim(&self) -> usize {
        self.y.shape()[1]
    }

    fn rows(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
        let c = t.shape()[1];
        let data = idx
            .iter()
            .flat_map(|&i| t.data()[i * c..(i + 1) * c].iter().copied())
            .collect();
        Tensor::new(vec![idx.len(), c], data).expect("row gather keeps width")
    }

    /// Rows `idx` (in that order), mask carried along.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: Self::rows(&self.x, idx),
            y: Self::rows(&self.y, idx),
            mask: self.mask.as_ref().map(|m| idx.iter().map(|&i| m[i]).collect()),
        }
    }

    /// Unmasked rows, or the whole task when there is no mask.
    pub fn context(&self) -> Self {
        match &self.mask {
            None => self.clone(),
            Some(m) => {
                let idx: Vec<usize> = (0..self.len()).filter(|&i| m[i]).collect();
                let mut t = self.subset(&idx);
                t.mask = None;
                t
            }
        }
    }

    /// The task without its mask.
    pub fn unmasked(&self) -> Self {
        Self {
            mask: None,
            ..self.clone()
        }
    }

    /// `self` followed by every row of `other` not already present in `self`.
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.x_dim() != other.x_dim() || self.y_dim() != other.y_dim() {
            return Err(dim_err("Task::union", "row widths differ"));
        }
        let (dx, dy) = (self.x_dim(), self.y_dim());
        fn row<T: Scalar>(t: &Task<T>, i: usize, dx: usize, dy: usize) -> (&[T], &[T]) {
            (
                &t.x.data()[i * dx..(i + 1) * dx],
                &t.y.data()[i * dy..(i + 1) * dy],
            )
        }
        let mut xs = self.x.data().to_vec();
        let mut ys = self.y.data().to_vec();
        let mut n = self.len();
        for j in 0..other.len() {
            let candidate = row(other, j, dx, dy);
            if (0..self.len()).any(|i| row(self, i, dx, dy) == candidate) {
                continue;
            }
            xs.extend_from_slice(candidate.0);
            ys.extend_from_slice(candidate.1);
            n += 1;
        }
        Self::new(Tensor::new(vec![n, dx], xs)?, Tensor::new(vec![n, dy], ys)?, None)
    }

    pub fn x_column(&self, j: usize) -> Vec<T> {
        (0..self.len()).map(|i| self.x[[i, j]]).collect()
    }

    pub fn y_column(&self, j: usize) -> Vec<T> {
        (0..self.len()).map(|i| self.y[[i, j]]).collect()
    }
}

/// A collection of tasks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetaDataset<T> {
    pub tasks: Vec<Task<T>>,
}

impl<T: Scalar> MetaDataset<T> {
    pub fn new(tasks: Vec<Task<T>>) -> Self {
        Self { tasks }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_follows_mask() {
        let mut t = Task::<f64>::from_xy(&[0.0, 1.0, 2.0], &[5.0, 6.0, 7.0]).unwrap();
        t.mask = Some(vec![true, false, true]);
        let c = t.context();
        assert_eq!(c.len(), 2);
        assert_eq!(c.y_column(0), vec![5.0, 7.0]);
        assert!(Task::new(t.x.clone(), t.y.clone(), Some(vec![true])).is_err());
    }

    #[test]
    fn union_skips_duplicates() {
        let a = Task::<f64>::from_xy(&[0.0, 1.0], &[5.0, 6.0]).unwrap();
        let b = Task::<f64>::from_xy(&[1.0, 2.0], &[6.0, 7.0]).unwrap();
        let u = a.union(&b).unwrap();
        assert_eq!(u.x_column(0), vec![0.0, 1.0, 2.0]);
        assert_eq!(Task::<f64>::empty(1, 1).union(&b).unwrap(), b);
    }
}
