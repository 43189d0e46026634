//! Co-authorship influence matrix between studies.
//!
//! `w[h][k] = 1` when study `h` receives influence from study `k`: the two
//! share at least one author and `k` is earlier than `h`, or they appeared
//! within one calendar year of each other (in which case the link is mutual).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use indexmap::IndexMap;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::StudyRecord;
use crate::error::{Error, Result};

/// Maximum year gap for a mutual (bi-directed) link.
pub const MUTUAL_LAG_YEARS: i32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CoauthorNetwork {
    pub study_order: Vec<String>,
    pub raw_w: DMatrix<f64>,
    pub row_std_w: DMatrix<f64>,
}

impl CoauthorNetwork {
    pub fn from_raw(study_order: Vec<String>, raw_w: DMatrix<f64>) -> Result<Self> {
        if study_order.len() != raw_w.nrows() {
            return Err(Error::invalid("study order and matrix size disagree"));
        }
        let row_std_w = row_standardize(&raw_w)?;
        Ok(CoauthorNetwork { study_order, raw_w, row_std_w })
    }

    pub fn len(&self) -> usize {
        self.study_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.study_order.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.raw_w.iter().filter(|&&w| w != 0.0).count()
    }

    /// Number of studies each study receives influence from (row sums).
    pub fn in_degrees(&self) -> Vec<usize> {
        self.raw_w.row_iter().map(|r| r.iter().filter(|&&w| w != 0.0).count()).collect()
    }

    /// Directed edges as `(from, to)` pairs: `to` receives influence from `from`.
    pub fn edges(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for h in 0..self.len() {
            for k in 0..self.len() {
                if self.raw_w[(h, k)] != 0.0 {
                    out.push((self.study_order[k].clone(), self.study_order[h].clone()));
                }
            }
        }
        out
    }
}

/// Build the influence matrix over `studies` in the given order.
pub fn build_adjacency<'a, I>(studies: I) -> Result<CoauthorNetwork>
where
    I: IntoIterator<Item = &'a StudyRecord>,
{
    let studies: Vec<&StudyRecord> = studies.into_iter().collect();
    if let Some(s) = studies.iter().find(|s| s.authors.is_empty()) {
        return Err(Error::invalid(format!("study {} has an empty author set", s.study_id)));
    }
    let j = studies.len();
    let mut w = DMatrix::zeros(j, j);
    for h in 0..j {
        for k in (h + 1)..j {
            let (a, b) = (studies[h], studies[k]);
            if a.authors.is_disjoint(&b.authors) {
                continue;
            }
            let gap = a.year - b.year;
            if gap.abs() <= MUTUAL_LAG_YEARS {
                w[(h, k)] = 1.0;
                w[(k, h)] = 1.0;
            } else if gap > 0 {
                // a is later: it receives influence from b
                w[(h, k)] = 1.0;
            } else {
                w[(k, h)] = 1.0;
            }
        }
    }
    CoauthorNetwork::from_raw(studies.iter().map(|s| s.study_id.clone()).collect(), w)
}

/// Divide each non-empty row by its sum; isolated rows stay zero.
pub fn row_standardize(raw_w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if raw_w.nrows() != raw_w.ncols() {
        return Err(Error::invalid(format!(
            "influence matrix must be square, got {}x{}",
            raw_w.nrows(),
            raw_w.ncols()
        )));
    }
    let mut out = raw_w.clone();
    for mut row in out.row_iter_mut() {
        let s: f64 = row.sum();
        if s != 0.0 {
            row /= s;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub n_studies: usize,
    pub n_authors: usize,
    /// Authors signing more than one study.
    pub n_multi_study_authors: usize,
    /// Studies signed per author, keyed by author id.
    pub studies_per_author: BTreeMap<String, usize>,
    /// Histogram: number of studies signed -> number of authors.
    pub signature_histogram: BTreeMap<usize, usize>,
    /// Studies receiving influence from no other study.
    pub n_zero_in_degree: usize,
    pub edge_count: usize,
}

pub fn network_summary<'a, I>(net: &CoauthorNetwork, studies: I) -> Result<NetworkSummary>
where
    I: IntoIterator<Item = &'a StudyRecord>,
{
    let by_id: IndexMap<&str, &StudyRecord> = studies.into_iter().map(|s| (s.study_id.as_str(), s)).collect();
    let mut per_author: BTreeMap<String, usize> = BTreeMap::new();
    for id in &net.study_order {
        let s = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::invalid(format!("network study {id} missing from study list")))?;
        for a in &s.authors {
            *per_author.entry(a.clone()).or_default() += 1;
        }
    }
    let mut hist = BTreeMap::new();
    for &c in per_author.values() {
        *hist.entry(c).or_default() += 1;
    }
    Ok(NetworkSummary {
        n_studies: net.len(),
        n_authors: per_author.len(),
        n_multi_study_authors: per_author.values().filter(|&&c| c > 1).count(),
        studies_per_author: per_author,
        signature_histogram: hist,
        n_zero_in_degree: net.in_degrees().iter().filter(|&&d| d == 0).count(),
        edge_count: net.edge_count(),
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("network csv: {e}"))
}

/// Write `from_study,to_study` rows, one per directed edge.
pub fn write_edge_list<W: Write>(net: &CoauthorNetwork, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["from_study", "to_study"]).map_err(csv_err)?;
    for (from, to) in net.edges() {
        w.write_record([from, to]).map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io { path: "edge list".into(), source })
}

/// Rebuild a network from an edge list over a known study order.
pub fn read_edge_list<R: Read>(rdr: R, study_order: Vec<String>) -> Result<CoauthorNetwork> {
    let index: IndexMap<&str, usize> = study_order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut w = DMatrix::zeros(study_order.len(), study_order.len());
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(rdr);
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let lookup = |i: usize| {
            let id = rec.get(i).unwrap_or("");
            index.get(id).copied().ok_or_else(|| Error::invalid(format!("unknown study `{id}` in edge list")))
        };
        let (from, to) = (lookup(0)?, lookup(1)?);
        if from == to {
            return Err(Error::invalid("self-loop in edge list"));
        }
        w[(to, from)] = 1.0;
    }
    CoauthorNetwork::from_raw(study_order, w)
}

/// Write the raw matrix with study ids as header and first column.
pub fn write_matrix<W: Write>(net: &CoauthorNetwork, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["study_id".to_string()];
    header.extend(net.study_order.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (h, id) in net.study_order.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend((0..net.len()).map(|k| format!("{}", net.raw_w[(h, k)] as u8)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io { path: "matrix".into(), source })
}

pub fn read_matrix<R: Read>(rdr: R) -> Result<CoauthorNetwork> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(rdr);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let order: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let j = order.len();
    let mut w = DMatrix::zeros(j, j);
    let mut rows = 0;
    for (h, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if h >= j || rec.get(0) != Some(order[h].as_str()) {
            return Err(Error::invalid("matrix rows must follow the header's study order"));
        }
        for k in 0..j {
            w[(h, k)] = match rec.get(k + 1) {
                Some("0") => 0.0,
                Some("1") => 1.0,
                other => return Err(Error::invalid(format!("matrix cell must be 0/1, got {other:?}"))),
            };
        }
        rows += 1;
    }
    if rows != j {
        return Err(Error::invalid("matrix is not square"));
    }
    CoauthorNetwork::from_raw(order, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn study(id: &str, year: i32, authors: &[&str]) -> StudyRecord {
        StudyRecord {
            study_id: id.into(),
            authors: authors.iter().map(|a| a.to_string()).collect(),
            year,
            published: false,
            sample_size: 1,
            study_covariates: IndexMap::new(),
        }
    }

    #[test]
    fn later_study_receives_influence() {
        let s = [study("A", 2005, &["x"]), study("B", 2010, &["x", "y"])];
        let net = build_adjacency(&s).unwrap();
        assert_eq!(net.raw_w[(1, 0)], 1.0);
        assert_eq!(net.raw_w[(0, 1)], 0.0);
        assert_eq!(net.edges(), vec![("A".to_string(), "B".to_string())]);
    }

    #[test]
    fn same_year_and_one_year_lag_are_mutual() {
        for gap in [0, 1] {
            let s = [study("A", 2008, &["x"]), study("B", 2008 + gap, &["x"])];
            let net = build_adjacency(&s).unwrap();
            assert_eq!((net.raw_w[(0, 1)], net.raw_w[(1, 0)]), (1.0, 1.0));
        }
        let s = [study("A", 2008, &["x"]), study("B", 2010, &["x"])];
        let net = build_adjacency(&s).unwrap();
        assert_eq!((net.raw_w[(0, 1)], net.raw_w[(1, 0)]), (0.0, 1.0));
    }

    #[test]
    fn disjoint_authors_have_no_link() {
        let s = [study("A", 2008, &["x"]), study("B", 2008, &["y"])];
        let net = build_adjacency(&s).unwrap();
        assert_eq!(net.edge_count(), 0);
        let summary = network_summary(&net, &s).unwrap();
        assert_eq!((summary.n_authors, summary.edge_count), (2, 0));
        assert_eq!(net.row_std_w, DMatrix::zeros(2, 2));
    }

    #[test]
    fn empty_author_set_is_rejected() {
        assert!(build_adjacency(&[study("A", 2000, &[])]).is_err());
    }

    #[test]
    fn row_standardize_examples() {
        let raw = DMatrix::from_row_slice(
            3,
            4,
            &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        );
        assert!(row_standardize(&raw).is_err());
        let raw = DMatrix::from_row_slice(
            4,
            4,
            &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0],
        );
        let w = row_standardize(&raw).unwrap();
        assert_eq!(w.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.5, 0.5, 0.0]);
        assert_eq!(w.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0; 4]);
        assert_eq!(w.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 0.0]);
        // idempotent on its output
        assert_eq!(row_standardize(&w).unwrap(), w);
    }

    #[test]
    fn chain_of_one_author_counts() {
        // enumerate pairs by the rule: each later study receives from every earlier one
        let s = [study("1", 2000, &["a"]), study("2", 2005, &["a"]), study("3", 2010, &["a"])];
        let net = build_adjacency(&s).unwrap();
        assert_eq!(net.in_degrees(), vec![0, 1, 2]);
        assert_eq!(net.edge_count(), 3);
        let summary = network_summary(&net, &s).unwrap();
        assert_eq!(summary.n_zero_in_degree, 1);
        assert_eq!(summary.studies_per_author["a"], 3);
        assert_eq!(summary.signature_histogram[&3], 1);
    }

    #[test]
    fn same_year_clique_is_complete() {
        for k in 1..6 {
            let s: Vec<_> = (0..k).map(|i| study(&i.to_string(), 2001, &["a"])).collect();
            assert_eq!(build_adjacency(&s).unwrap().edge_count(), k * (k - 1));
        }
    }

    #[test]
    fn csv_exports_round_trip() {
        let s = [
            study("A", 2000, &["a", "b"]),
            study("B", 2001, &["b"]),
            study("C", 2006, &["a"]),
            study("D", 2006, &["z"]),
        ];
        let net = build_adjacency(&s).unwrap();
        let mut buf = Vec::new();
        write_edge_list(&net, &mut buf).unwrap();
        assert_eq!(read_edge_list(buf.as_slice(), net.study_order.clone()).unwrap(), net);
        let mut buf = Vec::new();
        write_matrix(&net, &mut buf).unwrap();
        assert_eq!(read_matrix(buf.as_slice()).unwrap(), net);
    }

    fn arb_studies() -> impl Strategy<Value = Vec<StudyRecord>> {
        prop::collection::vec((1995i32..2015, prop::collection::btree_set(0u8..6, 1..3)), 1..9).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (year, authors))| StudyRecord {
                    study_id: format!("S{i}"),
                    authors: authors.into_iter().map(|a| format!("a{a}")).collect(),
                    year,
                    published: false,
                    sample_size: 1,
                    study_covariates: IndexMap::new(),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn structural_invariants(studies in arb_studies()) {
            let net = build_adjacency(&studies).unwrap();
            let j = net.len();
            for h in 0..j {
                prop_assert_eq!(net.raw_w[(h, h)], 0.0);
                let s: f64 = net.row_std_w.row(h).sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
                for k in 0..j {
                    if net.raw_w[(h, k)] != 0.0 {
                        prop_assert!(!studies[h].authors.is_disjoint(&studies[k].authors));
                    }
                    if (studies[h].year - studies[k].year).abs() > 1 {
                        prop_assert_eq!(net.raw_w[(h, k)] * net.raw_w[(k, h)], 0.0);
                    }
                }
            }
        }

        #[test]
        fn relabelling_permutes_conjugately(studies in arb_studies(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..studies.len()).collect();
            perm.shuffle(&mut crate::rng::stream(seed, 0));
            let permuted: Vec<StudyRecord> = perm.iter().map(|&i| studies[i].clone()).collect();
            let a = build_adjacency(&studies).unwrap();
            let b = build_adjacency(&permuted).unwrap();
            for h in 0..perm.len() {
                for k in 0..perm.len() {
                    prop_assert_eq!(b.raw_w[(h, k)], a.raw_w[(perm[h], perm[k])]);
                }
            }
        }
    }
}
