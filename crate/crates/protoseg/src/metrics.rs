//! Challenge scoring: per-quadrat set F1 from predicted vs true species,
//! per-transect averaging, and the final mean-of-means score, plus the
//! run-file format shared by inference and the scorer.
//!
//! Zero-denominator conventions: precision or recall with a 0/0 denominator
//! is 0, except when both the prediction and the truth are empty, in which
//! case precision = recall = f1 = 1 (a perfectly predicted empty quadrat).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type SpeciesSet = BTreeSet<u32>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuadratPrediction {
    pub quadrat_id: String,
    pub species_ids: SpeciesSet,
}

#[derive(Debug, Clone)]
pub struct ImageScore {
    pub quadrat_id: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct TransectReport {
    pub transect_id: u32,
    pub image_scores: Vec<ImageScore>,
    pub mean_f1: f64,
}

pub fn image_f1(quadrat_id: &str, pred: &SpeciesSet, truth: &SpeciesSet) -> ImageScore {
    let tp = pred.intersection(truth).count();
    let fp = pred.difference(truth).count();
    let fn_ = truth.difference(pred).count();
    let (precision, recall, f1) = if pred.is_empty() && truth.is_empty() {
        (1.0, 1.0, 1.0)
    } else {
        let p = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let r = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        (p, r, f)
    };
    ImageScore {
        quadrat_id: quadrat_id.to_owned(),
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
    }
}

/// Mean over transects of the mean per-quadrat F1 within each transect.
pub fn final_score(scores: &[(u32, f64)]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Argument("no scores to aggregate".into()));
    }
    let mut per_transect: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for &(tid, f1) in scores {
        let e = per_transect.entry(tid).or_insert((0.0, 0));
        e.0 += f1;
        e.1 += 1;
    }
    let n = per_transect.len() as f64;
    Ok(per_transect.values().map(|&(s, c)| s / c as f64).sum::<f64>() / n)
}

pub fn write_run(preds: &[QuadratPrediction], path: &Path) -> Result<()> {
    let mut sorted: Vec<&QuadratPrediction> = preds.iter().collect();
    sorted.sort_by(|a, b| a.quadrat_id.cmp(&b.quadrat_id));
    for pair in sorted.windows(2) {
        if pair[0].quadrat_id == pair[1].quadrat_id {
            return Err(Error::Argument(format!(
                "duplicate quadrat id {:?}",
                pair[0].quadrat_id
            )));
        }
    }
    let mut out = String::new();
    for p in sorted {
        let ids: Vec<String> = p.species_ids.iter().map(u32::to_string).collect();
        out.push_str(&p.quadrat_id);
        out.push(';');
        out.push_str(&ids.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_run(path: &Path) -> Result<Vec<QuadratPrediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut preds = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let (qid, rest) = line.split_once(';').ok_or(Error::Parse {
            line: lineno,
            msg: "missing ';' separator".into(),
        })?;
        if !seen.insert(qid.to_owned()) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("duplicate quadrat id {qid:?}"),
            });
        }
        let mut ids = SpeciesSet::new();
        for tok in rest.split_whitespace() {
            let id: u32 = tok.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("invalid species id {tok:?}"),
            })?;
            ids.insert(id);
        }
        preds.push(QuadratPrediction {
            quadrat_id: qid.to_owned(),
            species_ids: ids,
        });
    }
    Ok(preds)
}

/// Transect map as CSV `quadrat_id,transect_id`, no header.
pub fn read_transect_map(path: &Path) -> Result<BTreeMap<String, u32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (qid, tid) = line.split_once(',').ok_or(Error::Parse {
            line: i + 1,
            msg: "expected quadrat_id,transect_id".into(),
        })?;
        let tid: u32 = tid.trim().parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("invalid transect id {tid:?}"),
        })?;
        map.insert(qid.to_owned(), tid);
    }
    Ok(map)
}

pub fn write_transect_map(map: &BTreeMap<String, u32>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (qid, tid) in map {
        out.push_str(&format!("{qid},{tid}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Score a prediction run against a truth run. Quadrats present in the
/// truth but missing from predictions are scored with an empty prediction;
/// predicted quadrats unknown to the truth are an error.
pub fn score_runs(
    pred_path: &Path,
    truth_path: &Path,
    transect_map: &BTreeMap<String, u32>,
) -> Result<(Vec<TransectReport>, f64)> {
    let preds = read_run(pred_path)?;
    let truths = read_run(truth_path)?;
    let pred_map: BTreeMap<&str, &SpeciesSet> = preds
        .iter()
        .map(|p| (p.quadrat_id.as_str(), &p.species_ids))
        .collect();
    let truth_ids: BTreeSet<&str> = truths.iter().map(|t| t.quadrat_id.as_str()).collect();
    for p in &preds {
        if !truth_ids.contains(p.quadrat_id.as_str()) {
            return Err(Error::Data(format!(
                "predicted quadrat {:?} not present in truth",
                p.quadrat_id
            )));
        }
    }
    let empty = SpeciesSet::new();
    let mut by_transect: BTreeMap<u32, Vec<ImageScore>> = BTreeMap::new();
    for t in &truths {
        let tid = *transect_map.get(&t.quadrat_id).ok_or_else(|| {
            Error::Data(format!("quadrat {:?} missing from transect map", t.quadrat_id))
        })?;
        let pred = pred_map.get(t.quadrat_id.as_str()).copied().unwrap_or(&empty);
        by_transect
            .entry(tid)
            .or_default()
            .push(image_f1(&t.quadrat_id, pred, &t.species_ids));
    }
    let mut reports = Vec::new();
    let mut flat = Vec::new();
    for (tid, scores) in by_transect {
        let mean = scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64;
        for s in &scores {
            flat.push((tid, s.f1));
        }
        reports.push(TransectReport {
            transect_id: tid,
            image_scores: scores,
            mean_f1: mean,
        });
    }
    let total = final_score(&flat)?;
    Ok((reports, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[u32]) -> SpeciesSet {
        ids.iter().copied().collect()
    }

    #[test]
    fn exact_match_scores_one() {
        let s = image_f1("q", &set(&[1]), &set(&[1]));
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn partial_overlap_hand_computed() {
        // pred {a,b,c} vs truth {a,b,d}: tp=2 fp=1 fn=1, P=R=F1=2/3
        let s = image_f1("q", &set(&[1, 2, 3]), &set(&[1, 2, 4]));
        assert_eq!((s.tp, s.fp, s.fn_), (2, 1, 1));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_sets_score_zero() {
        let s = image_f1("q", &set(&[1]), &set(&[2]));
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_conventions() {
        assert_eq!(image_f1("q", &set(&[]), &set(&[])).f1, 1.0);
        assert_eq!(image_f1("q", &set(&[]), &set(&[1])).f1, 0.0);
        assert_eq!(image_f1("q", &set(&[1]), &set(&[])).f1, 0.0);
    }

    #[test]
    fn f1_is_symmetric_in_the_two_sets() {
        let a = set(&[1, 2, 5]);
        let b = set(&[2, 5, 9, 11]);
        assert_eq!(image_f1("q", &a, &b).f1, image_f1("q", &b, &a).f1);
    }

    #[test]
    fn final_score_is_mean_of_means() {
        // transect 0: {1.0, 0.5}; transect 1: {0.0} -> (0.75 + 0)/2
        let v = final_score(&[(0, 1.0), (0, 0.5), (1, 0.0)]).unwrap();
        assert!((v - 0.375).abs() < 1e-12);
        assert!(final_score(&[]).is_err());
        assert_eq!(final_score(&[(3, 0.25)]).unwrap(), 0.25);
    }

    #[test]
    fn run_file_sorts_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.txt");
        let preds = vec![
            QuadratPrediction {
                quadrat_id: "q2".into(),
                species_ids: set(&[7]),
            },
            QuadratPrediction {
                quadrat_id: "q1".into(),
                species_ids: set(&[3, 1]),
            },
        ];
        write_run(&preds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "q1;1 3\nq2;7\n");
        let back = read_run(&path).unwrap();
        assert_eq!(back[0].quadrat_id, "q1");
        assert_eq!(back[0].species_ids, set(&[1, 3]));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.txt");
        fs::write(&path, "q1;1 x\n").unwrap();
        match read_run(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_quadrat_rejected() {
        let preds = vec![
            QuadratPrediction {
                quadrat_id: "q".into(),
                species_ids: set(&[1]),
            },
            QuadratPrediction {
                quadrat_id: "q".into(),
                species_ids: set(&[2]),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        assert!(write_run(&preds, &dir.path().join("r.txt")).is_err());
    }
}
