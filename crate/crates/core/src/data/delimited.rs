//! Comma-separated ingest and export.
//!
//! Header row first; a `label` column with values 0/1; an optional
//! `session_id` column; every other column (or the explicitly listed ones)
//! is a categorical feature. Token strings map to dense ids through
//! per-field vocabularies built on the training file. Id 0 of every feature
//! field is reserved for tokens never seen in training.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::schema::{Dataset, DatasetSchema, Sample, Split, LABEL_FIELD_NAME};
use crate::error::DataError;

pub const SESSION_COLUMN: &str = "session_id";
pub const OOV_TOKEN: &str = "<oov>";

/// Which columns to read.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DelimitedSpec {
    /// Feature columns in field order; empty means every column except the
    /// label and session columns, in header order.
    pub features: Vec<String>,
}

/// String ↔ id map for one feature field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        v.tokens.push(OOV_TOKEN.to_string());
        v
    }

    /// Vocabulary whose ids are exactly the given strings' positions after the
    /// reserved OOV slot.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self::new();
        for t in tokens {
            v.intern(t.into());
        }
        v
    }

    fn intern(&mut self, token: String) -> usize {
        if let Some(&id) = self.ids.get(&token) {
            return id;
        }
        let id = self.tokens.len();
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Distinct training tokens plus the OOV slot.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabularies {
    pub names: Vec<String>,
    pub fields: Vec<Vocabulary>,
}

impl Vocabularies {
    /// Token strings equal to the ids, with no OOV slot. For exporting data
    /// whose ids were not read from a file, such as synthetic records.
    pub fn numbered(schema: &DatasetSchema) -> Self {
        let fields = schema.fields()[..schema.num_features()]
            .iter()
            .map(|f| {
                let tokens: Vec<String> = (0..f.vocab_size).map(|i| i.to_string()).collect();
                let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
                Vocabulary { tokens, ids }
            })
            .collect();
        Self {
            names: schema.feature_names().map(String::from).collect(),
            fields,
        }
    }

    pub fn schema(&self) -> Result<DatasetSchema, DataError> {
        DatasetSchema::new(
            self.names
                .iter()
                .cloned()
                .zip(self.fields.iter().map(Vocabulary::len)),
        )
    }
}

struct Layout {
    features: Vec<usize>,
    label: usize,
    session: Option<usize>,
    width: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => DataError::RaggedRow {
            path: path.to_path_buf(),
            line,
            expected: expected_len as usize,
            found: len as usize,
        },
        other => io_err(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {line}: {other:?}")),
        ),
    }
}

fn open(path: &Path, spec: &DelimitedSpec) -> Result<(csv::Reader<File>, Layout, Vec<String>), DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    if file.metadata().map_err(|e| io_err(path, e))?.len() == 0 {
        return Err(DataError::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let label = find(LABEL_FIELD_NAME).ok_or_else(|| DataError::MissingColumn {
        path: path.to_path_buf(),
        column: LABEL_FIELD_NAME.to_string(),
    })?;
    let session = find(SESSION_COLUMN);
    let names: Vec<String> = if spec.features.is_empty() {
        header
            .iter()
            .filter(|h| *h != LABEL_FIELD_NAME && *h != SESSION_COLUMN)
            .cloned()
            .collect()
    } else {
        spec.features.clone()
    };
    let features = names
        .iter()
        .map(|n| {
            find(n).ok_or_else(|| DataError::MissingColumn {
                path: path.to_path_buf(),
                column: n.clone(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if features.is_empty() {
        return Err(DataError::Schema(format!("{}: no feature columns", path.display())));
    }
    let layout = Layout {
        features,
        label,
        session,
        width: header.len(),
    };
    Ok((reader, layout, names))
}

fn read_rows(
    path: &Path,
    reader: &mut csv::Reader<File>,
    layout: &Layout,
    mut token_id: impl FnMut(usize, &str) -> usize,
) -> Result<Vec<Sample>, DataError> {
    let mut samples = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(csv_err(path, e)),
        }
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != layout.width {
            return Err(DataError::RaggedRow {
                path: path.to_path_buf(),
                line,
                expected: layout.width,
                found: record.len(),
            });
        }
        let raw_label = record[layout.label].trim();
        let label = match raw_label {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DataError::BadLabel {
                    path: path.to_path_buf(),
                    line,
                    value: other.to_string(),
                })
            }
        };
        let mut tokens: Vec<usize> = layout
            .features
            .iter()
            .enumerate()
            .map(|(k, &col)| token_id(k, record[col].trim()))
            .collect();
        tokens.push(label);
        let mut sample = Sample::new(tokens);
        if let Some(col) = layout.session {
            sample.session_id = Some(record[col].trim().to_string());
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(DataError::NoRows {
            path: path.to_path_buf(),
        });
    }
    Ok(samples)
}

/// Reads a training file, building one vocabulary per feature column.
pub fn load_delimited(path: &Path, spec: &DelimitedSpec) -> Result<(Dataset, Vocabularies), DataError> {
    let (mut reader, layout, names) = open(path, spec)?;
    let mut vocabs: Vec<Vocabulary> = names.iter().map(|_| Vocabulary::new()).collect();
    let samples = read_rows(path, &mut reader, &layout, |k, tok| {
        vocabs[k].intern(tok.to_string())
    })?;
    let vocabs = Vocabularies {
        names,
        fields: vocabs,
    };
    let schema = vocabs.schema()?;
    Ok((Dataset::new(schema, samples, Split::Train)?, vocabs))
}

/// Reads an evaluation file with fixed vocabularies; unseen tokens map to id 0.
pub fn load_delimited_with(
    path: &Path,
    vocabs: &Vocabularies,
    split: Split,
) -> Result<Dataset, DataError> {
    let spec = DelimitedSpec {
        features: vocabs.names.clone(),
    };
    let (mut reader, layout, _) = open(path, &spec)?;
    let samples = read_rows(path, &mut reader, &layout, |k, tok| vocabs.fields[k].id(tok))?;
    Dataset::new(vocabs.schema()?, samples, split)
}

/// Writes `dataset` with token strings from `vocabs`.
pub fn write_delimited(dataset: &Dataset, vocabs: &Vocabularies, path: &Path) -> Result<(), DataError> {
    let mut out = Vec::new();
    let mut header: Vec<&str> = vocabs.names.iter().map(String::as_str).collect();
    header.push(LABEL_FIELD_NAME);
    let with_session = dataset.has_sessions();
    if with_session {
        header.push(SESSION_COLUMN);
    }
    let mut w = csv::Writer::from_writer(&mut out);
    let werr = |e: csv::Error| io_err(path, std::io::Error::other(e.to_string()));
    w.write_record(&header).map_err(werr)?;
    for s in dataset.samples() {
        let mut row: Vec<String> = s
            .features()
            .iter()
            .enumerate()
            .map(|(k, &t)| vocabs.fields[k].token(t).to_string())
            .collect();
        row.push(s.label().to_string());
        if with_session {
            row.push(s.session_id.clone().unwrap_or_default());
        }
        w.write_record(&row).map_err(werr)?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    drop(w);
    let mut f = File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn builds_vocab_with_oov_slot() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.csv", "user,item,label\nu1,a,1\nu2,a,0\nu1,b,1\n");
        let (ds, vocabs) = load_delimited(&p, &DelimitedSpec::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.schema().vocab_sizes(), vec![3, 3, 2]);
        assert_eq!(ds.samples()[0].tokens, vec![1, 1, 1]);
        assert_eq!(ds.samples()[2].tokens, vec![1, 2, 1]);
        assert_eq!(vocabs.fields[0].token(0), OOV_TOKEN);
    }

    #[test]
    fn bad_label_cites_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "t.csv",
            "a,b,label\nx,y,0\nx,y,1\nx,z,0\nz,z,2\n",
        );
        match load_delimited(&p, &DelimitedSpec::default()) {
            Err(DataError::BadLabel { line, value, .. }) => {
                assert_eq!(line, 5);
                assert_eq!(value, "2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unseen_eval_token_maps_to_oov() {
        let dir = tempfile::tempdir().unwrap();
        let train = write(dir.path(), "train.csv", "a,label\nx,0\ny,1\n");
        let eval = write(dir.path(), "eval.csv", "a,label\ny,0\nnever,1\n");
        let (_, vocabs) = load_delimited(&train, &DelimitedSpec::default()).unwrap();
        let ds = load_delimited_with(&eval, &vocabs, Split::Test).unwrap();
        assert_eq!(ds.samples()[0].tokens[0], 2);
        assert_eq!(ds.samples()[1].tokens[0], 0);
    }

    #[test]
    fn structural_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write(dir.path(), "e.csv", "");
        assert!(matches!(
            load_delimited(&empty, &DelimitedSpec::default()),
            Err(DataError::EmptyFile { .. })
        ));
        let nolabel = write(dir.path(), "n.csv", "a,b\n1,2\n");
        assert!(matches!(
            load_delimited(&nolabel, &DelimitedSpec::default()),
            Err(DataError::MissingColumn { .. })
        ));
        let spec = DelimitedSpec {
            features: vec!["missing".into()],
        };
        let ok = write(dir.path(), "o.csv", "a,label\n1,0\n");
        assert!(matches!(
            load_delimited(&ok, &spec),
            Err(DataError::MissingColumn { column, .. }) if column == "missing"
        ));
        let header_only = write(dir.path(), "h.csv", "a,label\n");
        assert!(matches!(
            load_delimited(&header_only, &DelimitedSpec::default()),
            Err(DataError::NoRows { .. })
        ));
    }

    #[test]
    fn sessions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.csv", "a,label,session_id\nx,1,s1\ny,0,s2\n");
        let (ds, vocabs) = load_delimited(&p, &DelimitedSpec::default()).unwrap();
        assert_eq!(ds.samples()[1].session_id.as_deref(), Some("s2"));
        let out = dir.path().join("back.csv");
        write_delimited(&ds, &vocabs, &out).unwrap();
        let again = load_delimited_with(&out, &vocabs, Split::Train).unwrap();
        assert_eq!(again.samples(), ds.samples());
    }
}
