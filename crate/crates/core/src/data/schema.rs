use std::collections::HashSet;
use std::fmt;

use crate::error::DataError;

pub const LABEL_FIELD_NAME: &str = "label";

/// One categorical field. Real tokens are `0..vocab_size`; `vocab_size`
/// itself is the absorbing mask token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSchema {
    pub index: usize,
    pub name: String,
    pub vocab_size: usize,
}

impl FieldSchema {
    pub fn mask_id(&self) -> usize {
        self.vocab_size
    }
}

/// Feature fields followed by the binary label field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSchema {
    fields: Vec<FieldSchema>,
}

impl DatasetSchema {
    /// Builds a schema from `(name, vocab_size)` feature fields; the label
    /// field is appended last with a vocabulary of 2.
    pub fn new<S: Into<String>>(
        features: impl IntoIterator<Item = (S, usize)>,
    ) -> Result<Self, DataError> {
        let mut fields: Vec<FieldSchema> = features
            .into_iter()
            .enumerate()
            .map(|(index, (name, vocab_size))| FieldSchema {
                index,
                name: name.into(),
                vocab_size,
            })
            .collect();
        if fields.is_empty() {
            return Err(DataError::Schema("at least one feature field required".into()));
        }
        fields.push(FieldSchema {
            index: fields.len(),
            name: LABEL_FIELD_NAME.to_string(),
            vocab_size: 2,
        });
        let mut seen = HashSet::new();
        for f in &fields {
            if f.vocab_size == 0 {
                return Err(DataError::Schema(format!("field `{}` has empty vocabulary", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(DataError::Schema(format!("duplicate field name `{}`", f.name)));
            }
        }
        Ok(Self { fields })
    }

    /// Schema with `n` anonymous feature fields `f0..` of equal vocabulary.
    pub fn uniform(n: usize, vocab: usize) -> Result<Self, DataError> {
        Self::new((0..n).map(|i| (format!("f{i}"), vocab)))
    }

    pub fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    pub fn field(&self, k: usize) -> &FieldSchema {
        &self.fields[k]
    }

    /// Feature fields plus the label.
    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn num_features(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn label_index(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.vocab_size).collect()
    }

    pub fn mask_id(&self, k: usize) -> usize {
        self.fields[k].vocab_size
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.fields[..self.num_features()].iter().map(|f| f.name.as_str())
    }

    /// Checks a clean record: one real token per field, label in {0, 1}.
    pub fn validate(&self, sample: &Sample) -> Result<(), String> {
        if sample.tokens.len() != self.fields.len() {
            return Err(format!(
                "expected {} tokens, found {}",
                self.fields.len(),
                sample.tokens.len()
            ));
        }
        for (f, &t) in self.fields.iter().zip(&sample.tokens) {
            if t >= f.vocab_size {
                return Err(format!(
                    "field `{}` token {t} outside vocabulary of {}",
                    f.name, f.vocab_size
                ));
            }
        }
        if !(sample.weight > 0.0 && sample.weight.is_finite()) {
            return Err(format!("weight {} must be positive", sample.weight));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// One token per field, label last.
    pub tokens: Vec<usize>,
    pub weight: f64,
    pub session_id: Option<String>,
}

impl Sample {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self {
            tokens,
            weight: 1.0,
            session_id: None,
        }
    }

    pub fn with_session(mut self, session: impl Into<String>) -> Self {
        self.session_id = Some(session.into());
        self
    }

    pub fn label(&self) -> usize {
        *self.tokens.last().expect("sample has a label field")
    }

    pub fn features(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: DatasetSchema,
    samples: Vec<Sample>,
    split: Split,
}

impl Dataset {
    pub fn new(schema: DatasetSchema, samples: Vec<Sample>, split: Split) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::Schema("dataset has no samples".into()));
        }
        for (index, s) in samples.iter().enumerate() {
            schema
                .validate(s)
                .map_err(|reason| DataError::BadSample { index, reason })?;
        }
        Ok(Self {
            schema,
            samples,
            split,
        })
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        self.samples.iter().filter(|s| s.label() == 1).count() as f64 / self.len() as f64
    }

    pub fn has_sessions(&self) -> bool {
        self.samples.iter().all(|s| s.session_id.is_some())
    }

    /// Subset by sample index, keeping order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset, DataError> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset::new(self.schema.clone(), samples, split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_is_appended_with_mask_after_vocab() {
        let s = DatasetSchema::new([("user", 3), ("item", 5)]).unwrap();
        assert_eq!(s.num_fields(), 3);
        assert_eq!(s.label_index(), 2);
        assert_eq!(s.field(2).name, "label");
        assert_eq!(s.mask_id(1), 5);
        assert_eq!(s.mask_id(2), 2);
    }

    #[test]
    fn rejects_duplicates_and_empty_vocab() {
        assert!(DatasetSchema::new([("a", 3), ("a", 4)]).is_err());
        assert!(DatasetSchema::new([("a", 0)]).is_err());
        assert!(DatasetSchema::new([("label", 2)]).is_err());
    }

    #[test]
    fn mask_token_is_not_clean_data() {
        let s = DatasetSchema::uniform(2, 4).unwrap();
        let bad = Sample::new(vec![4, 0, 1]);
        assert!(s.validate(&bad).is_err());
        let bad_label = Sample::new(vec![1, 0, 2]);
        assert!(s.validate(&bad_label).is_err());
        assert!(Dataset::new(s.clone(), vec![], Split::Train).is_err());
        assert!(Dataset::new(s, vec![Sample::new(vec![3, 3, 1])], Split::Train).is_ok());
    }
}
