//! Zero-shot classification, label normalization and accuracy reporting.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{cosine, Matrix, Scalar};
use crate::model::{class_prototype, project_visual, Weights};
use crate::sampler::Signature;

pub const DEFAULT_CLASSES: [&str; 11] = [
    "Abuse",
    "Arrest",
    "Arson",
    "Assault",
    "Burglary",
    "Fighting",
    "Robbery",
    "Shooting",
    "Stealing",
    "Shoplifting",
    "Vandalism",
];

pub const PREDICTIONS_HEADER: [&str; 3] = ["video_id", "true_label", "predicted_text"];

/// Ordered class names. The order fixes confusion-matrix axes and breaks
/// classification ties.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSet {
    names: Vec<String>,
    lowered: Vec<String>,
}

impl ClassSet {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("class set is empty".into()));
        }
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        let lowered: Vec<String> = names.iter().map(|s| s.to_lowercase()).collect();
        for (i, n) in lowered.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config(format!("class name #{i} is empty")));
            }
            if lowered[..i].contains(n) {
                return Err(Error::Config(format!("duplicate class name {:?}", names[i])));
            }
        }
        Ok(Self { names, lowered })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    /// Case-insensitive lookup.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        let name = name.to_lowercase();
        self.lowered.iter().position(|n| *n == name)
    }
}

impl Default for ClassSet {
    fn default() -> Self {
        Self::new(&DEFAULT_CLASSES).expect("default classes are unique")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Class(usize),
    Unknown,
}

impl Label {
    pub fn name<'a>(&self, classes: &'a ClassSet) -> &'a str {
        match *self {
            Label::Class(i) => classes.name(i),
            Label::Unknown => "Unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub video_id: String,
    pub true_label: String,
    pub predicted_text: String,
}

/// Projected class prototypes, computed once per (weights, class set).
#[derive(Debug, Clone)]
pub struct ClassAnchors {
    anchors: Vec<Vec<f64>>,
}

impl ClassAnchors {
    pub fn new<T: Scalar>(classes: &ClassSet, weights: &Weights<T>) -> Result<Self> {
        let dp = weights.config.patch_dim;
        let mut anchors = Vec::with_capacity(classes.len());
        for name in classes.names() {
            let proto = class_prototype(name, &weights.config)?;
            let row = Matrix::from_vec(1, dp, proto.iter().map(|&v| T::narrow(v as f64)).collect())?;
            let projected = project_visual(&row, weights)?;
            anchors.push(projected.data().iter().map(|v| v.widen()).collect());
        }
        Ok(Self { anchors })
    }

    pub fn from_vectors(anchors: Vec<Vec<f64>>) -> Self {
        Self { anchors }
    }

    /// Argmax cosine; the first maximum wins. A zero vector is `Unknown`.
    pub fn classify_vector(&self, pooled: &[f64]) -> Label {
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in self.anchors.iter().enumerate() {
            let Some(c) = cosine(pooled, a) else {
                continue;
            };
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((i, c));
            }
        }
        best.map_or(Label::Unknown, |(i, _)| Label::Class(i))
    }

    pub fn classify<T: Scalar>(&self, signature: &Signature<T>) -> Label {
        self.classify_vector(&signature.pooled_f64())
    }
}

/// One-shot convenience around [`ClassAnchors`].
pub fn classify<T: Scalar>(
    signature: &Signature<T>,
    classes: &ClassSet,
    weights: &Weights<T>,
) -> Result<Label> {
    Ok(ClassAnchors::new(classes, weights)?.classify(signature))
}

/// Earliest class-name occurrence in the lowercased text; at equal
/// positions the longer name wins.
pub fn normalize_label(text: &str, classes: &ClassSet) -> Label {
    let text = text.to_lowercase();
    let mut best: Option<(usize, usize, usize)> = None;
    for (i, name) in classes.lowered.iter().enumerate() {
        if let Some(pos) = text.find(name.as_str()) {
            let better = match best {
                None => true,
                Some((bp, blen, _)) => pos < bp || (pos == bp && name.len() > blen),
            };
            if better {
                best = Some((pos, name.len(), i));
            }
        }
    }
    best.map_or(Label::Unknown, |(_, _, i)| Label::Class(i))
}

fn true_index(record: &EvalRecord, classes: &ClassSet) -> Result<usize> {
    classes.index_of(&record.true_label).ok_or_else(|| {
        Error::Input(format!(
            "record {:?}: true label {:?} is not in the class set",
            record.video_id, record.true_label
        ))
    })
}

pub fn accuracy(records: &[EvalRecord], classes: &ClassSet) -> Result<f64> {
    let cm = ConfusionMatrix::from_records(records, classes)?;
    Ok(cm.accuracy())
}

/// Rows are true classes; columns are predicted classes plus a trailing
/// `Unknown` column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: ClassSet,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_records(records: &[EvalRecord], classes: &ClassSet) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Usage("no records to evaluate".into()));
        }
        let k = classes.len();
        let mut counts = vec![0u64; k * (k + 1)];
        for r in records {
            let t = true_index(r, classes)?;
            let col = match normalize_label(&r.predicted_text, classes) {
                Label::Class(p) => p,
                Label::Unknown => k,
            };
            counts[t * (k + 1) + col] += 1;
        }
        Ok(Self {
            classes: classes.clone(),
            counts,
        })
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    pub fn get(&self, true_class: usize, predicted: Label) -> u64 {
        let k = self.classes.len();
        let col = match predicted {
            Label::Class(p) => p,
            Label::Unknown => k,
        };
        self.counts[true_class * (k + 1) + col]
    }

    pub fn row(&self, true_class: usize) -> &[u64] {
        let w = self.classes.len() + 1;
        &self.counts[true_class * w..(true_class + 1) * w]
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        self.row(true_class).iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len())
            .map(|i| self.get(i, Label::Class(i)))
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Accuracy as a percentage with one decimal, rounded half up in
    /// integer arithmetic ("44.6" for 446 of 1000).
    pub fn accuracy_percent(&self) -> String {
        format_percent(self.trace(), self.total())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Internal(format!("writing confusion CSV: {e}"));
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.classes.names().iter().cloned());
        header.push("Unknown".into());
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.classes.len() {
            let mut row = vec![self.classes.name(i).to_string()];
            row.extend(self.row(i).iter().map(u64::to_string));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Internal(format!("writing confusion CSV: {e}")))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

pub fn format_percent(correct: u64, total: u64) -> String {
    if total == 0 {
        return "n/a".into();
    }
    let tenths = (correct * 2000 + total) / (2 * total);
    format!("{}.{}", tenths / 10, tenths % 10)
}

/// Parses a predictions CSV. Errors carry the 1-based line number.
pub fn read_predictions<R: Read>(input: R, location: &str) -> Result<Vec<EvalRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = Vec::new();
    let mut saw_header = false;
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::format(format!("{location}:{line}"), e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let at = format!("{location}:{line}");
        if !saw_header {
            if row.iter().ne(PREDICTIONS_HEADER) {
                return Err(Error::format(
                    at,
                    format!("expected header {}", PREDICTIONS_HEADER.join(",")),
                ));
            }
            saw_header = true;
            continue;
        }
        if row.len() != 3 {
            return Err(Error::format(at, format!("expected 3 fields, found {}", row.len())));
        }
        if row[0].is_empty() || row[1].is_empty() {
            return Err(Error::format(at, "video_id and true_label must be nonempty"));
        }
        records.push(EvalRecord {
            video_id: row[0].to_string(),
            true_label: row[1].to_string(),
            predicted_text: row[2].to_string(),
        });
    }
    if !saw_header {
        return Err(Error::format(format!("{location}:1"), "empty predictions file"));
    }
    if records.is_empty() {
        return Err(Error::format(format!("{location}:2"), "no prediction rows"));
    }
    Ok(records)
}

pub fn load_predictions(path: &Path) -> Result<Vec<EvalRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions(std::io::BufReader::new(f), &path.display().to_string())
}

pub fn write_predictions<W: Write>(out: W, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Internal(format!("writing predictions: {e}"));
    w.write_record(PREDICTIONS_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([&r.video_id, &r.true_label, &r.predicted_text])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Internal(format!("writing predictions: {e}")))?;
    Ok(())
}

pub fn save_predictions(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_predictions(&mut buf, records)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// One row of a results table laid out like the paper's accuracy table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub n_s: Option<usize>,
    pub r: String,
    pub accuracy: String,
}

impl fmt::Display for ReportRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ns = self.n_s.map_or_else(|| "-".to_string(), |n| n.to_string());
        write!(f, "{:<12} {:>4} {:>6} {:>8}", self.method, ns, self.r, self.accuracy)
    }
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut s = format!("{:<12} {:>4} {:>6} {:>8}\n", "Method", "N_s", "r_j", "Accuracy");
    for r in rows {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ModelConfig};

    fn rec(id: &str, t: &str, p: &str) -> EvalRecord {
        EvalRecord {
            video_id: id.into(),
            true_label: t.into(),
            predicted_text: p.into(),
        }
    }

    #[test]
    fn class_set_rules() {
        let cs = ClassSet::default();
        assert_eq!(cs.len(), 11);
        assert_eq!(cs.index_of("fighting"), Some(5));
        assert_eq!(cs.index_of("SHOPLIFTING"), Some(9));
        assert!(ClassSet::new(&["A", "a"]).is_err());
        assert!(ClassSet::new::<&str>(&[]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let cs = ClassSet::default();
        let name = |t: &str| normalize_label(t, &cs).name(&cs).to_string();
        assert_eq!(name("The action is Shoplifting."), "Shoplifting");
        assert_eq!(name("people fighting then stealing"), "Fighting");
        assert_eq!(name("nothing unusual happens"), "Unknown");
        for c in cs.names() {
            assert_eq!(&name(c), c);
        }
    }

    #[test]
    fn normalize_prefers_longer_at_same_position() {
        let cs = ClassSet::new(&["Shop", "Shoplifting"]).unwrap();
        assert_eq!(normalize_label("shoplifting", &cs), Label::Class(1));
        let cs = ClassSet::new(&["Shoplifting", "Shop"]).unwrap();
        assert_eq!(normalize_label("shoplifting", &cs), Label::Class(0));
    }

    #[test]
    fn accuracy_examples() {
        let cs = ClassSet::default();
        let recs = [
            rec("a", "Arson", "arson"),
            rec("b", "Abuse", "abuse!"),
            rec("c", "Arrest", "robbery"),
        ];
        assert!((accuracy(&recs, &cs).unwrap() - 2.0 / 3.0).abs() < 1e-4);
        let unk = [rec("a", "Arson", "?"), rec("b", "Abuse", "")];
        assert_eq!(accuracy(&unk, &cs).unwrap(), 0.0);
        assert!(matches!(accuracy(&[], &cs), Err(Error::Usage(_))));
        assert!(matches!(
            accuracy(&[rec("a", "Dancing", "x")], &cs),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn confusion_cells() {
        let cs = ClassSet::default();
        let recs = [
            rec("a", "Assault", "fighting"),
            rec("b", "Assault", "Assault"),
            rec("c", "Arson", "no idea"),
        ];
        let cm = ConfusionMatrix::from_records(&recs, &cs).unwrap();
        assert_eq!(cm.get(3, Label::Class(5)), 1);
        assert_eq!(cm.get(3, Label::Class(3)), 1);
        assert_eq!(cm.get(2, Label::Unknown), 1);
        assert_eq!(cm.row_sum(3), 2);
        assert_eq!(cm.trace(), 1);
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(446, 1000), "44.6");
        assert_eq!(format_percent(1, 1), "100.0");
        assert_eq!(format_percent(0, 5), "0.0");
        assert_eq!(format_percent(2, 3), "66.7");
        assert_eq!(format_percent(1, 8), "12.5");
    }

    #[test]
    fn confusion_csv_layout() {
        let cs = ClassSet::new(&["A", "B"]).unwrap();
        let cm = ConfusionMatrix::from_records(&[rec("1", "A", "b"), rec("2", "B", "z")], &cs).unwrap();
        let mut buf = Vec::new();
        cm.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "true\\predicted,A,B,Unknown\nA,0,1,0\nB,0,0,1\n"
        );
    }

    #[test]
    fn predictions_roundtrip_with_quoting() {
        let recs = vec![
            rec("v1", "Arson", "arson, clearly"),
            rec("v2", "Abuse", "say \"abuse\""),
        ];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("video_id,true_label,predicted_text\n"));
        assert_eq!(read_predictions(&buf[..], "mem").unwrap(), recs);
    }

    #[test]
    fn malformed_predictions_report_lines() {
        let bad = "video_id,true_label,predicted_text\na,Arson,x\nb,Arson\n";
        match read_predictions(bad.as_bytes(), "p.csv") {
            Err(Error::Format { location, .. }) => assert_eq!(location, "p.csv:3"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_predictions(&b""[..], "e"), Err(Error::Format { .. })));
        assert!(matches!(
            read_predictions(&b"id,label,text\n"[..], "h"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn classify_self_match_and_zero() {
        let cfg = ModelConfig::default();
        let w = init_weights::<f64>(&cfg).unwrap();
        let cs = ClassSet::default();
        let anchors = ClassAnchors::new(&cs, &w).unwrap();
        let arson = anchors.anchors[2].clone();
        assert_eq!(anchors.classify_vector(&arson), Label::Class(2));
        assert_eq!(anchors.classify_vector(&vec![0.0; cfg.d]), Label::Unknown);
    }

    #[test]
    fn classify_ties_go_to_lowest_index() {
        let a = ClassAnchors::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(a.classify_vector(&[1.0, 1.0]), Label::Class(0));
        assert_eq!(a.classify_vector(&[0.0, 0.0]), Label::Unknown);
        assert_eq!(a.classify_vector(&[1.0, 2.0]), Label::Class(1));
    }

    #[test]
    fn report_layout() {
        let rows = [ReportRow {
            method: "Self-ReS".into(),
            n_s: Some(5),
            r: "3".into(),
            accuracy: format_percent(446, 1000),
        }];
        let s = format_report(&rows);
        assert!(s.lines().nth(1).unwrap().contains("44.6"));
    }
}
