use crate::error::{Error, Result};

/// Class-by-class counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_predictions(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape("confusion", format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::invalid(format!("class pair ({truth}, {pred}) outside {} classes", self.classes)));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total().max(1) as f64
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.classes).map(|t| (0..self.classes).map(|p| self.get(t, p)).sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<u64> {
        (0..self.classes).map(|p| (0..self.classes).map(|t| self.get(t, p)).sum()).collect()
    }

    /// Per-class recall; `None` for classes absent from the truth labels.
    pub fn recall(&self) -> Vec<Option<f64>> {
        self.row_sums()
            .iter()
            .enumerate()
            .map(|(i, &r)| (r > 0).then(|| self.get(i, i) as f64 / r as f64))
            .collect()
    }

    /// Largest fraction of all predictions that went to a single class.
    pub fn max_column_share(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        *self.column_sums().iter().max().unwrap_or(&0) as f64 / total as f64
    }

    /// CSV grid with a `true\pred` header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for p in 0..self.classes {
            s.push_str(&format!(",{p}"));
        }
        s.push('\n');
        for t in 0..self.classes {
            s.push_str(&t.to_string());
            for p in 0..self.classes {
                s.push_str(&format!(",{}", self.get(t, p)));
            }
            s.push('\n');
        }
        s
    }
}
