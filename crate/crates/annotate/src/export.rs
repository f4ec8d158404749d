//! Turning collected responses into preference records and rubric means.

use std::collections::{BTreeMap, BTreeSet};

use memecap_core::agreement::{krippendorff_alpha, Level, AGREEMENT_THRESHOLD};
use memecap_core::metrics::{rubric_scale, RubricScores};
use memecap_core::reward::{PreferenceRecord, PreferenceSource};

use crate::model::{AnnotationResponse, AnnotationTask, RubricSummary, TaskKind, Winner};
use crate::ServiceError;

pub const DEFAULT_MIN_ANNOTATORS: usize = 3;

/// Pair tasks of one meme and each annotator's win counts over them.
struct SetTally<'a> {
    candidates: Vec<&'a str>,
    pair_tasks: usize,
    /// annotator → (answered pair tasks, wins per candidate, latest timestamp)
    by_annotator: BTreeMap<&'a str, (usize, BTreeMap<&'a str, f64>, Option<&'a str>)>,
}

fn tallies<'a>(tasks: &'a [AnnotationTask], responses: &'a [AnnotationResponse]) -> BTreeMap<&'a str, SetTally<'a>> {
    let mut sets: BTreeMap<&str, SetTally> = BTreeMap::new();
    let mut by_id = BTreeMap::new();
    for t in tasks.iter().filter(|t| t.kind == TaskKind::Pair) {
        by_id.insert(t.id.as_str(), t);
        let s = sets.entry(t.meme_id.as_str()).or_insert_with(|| SetTally { candidates: Vec::new(), pair_tasks: 0, by_annotator: BTreeMap::new() });
        s.pair_tasks += 1;
        for c in &t.captions {
            if !s.candidates.contains(&c.id.as_str()) {
                s.candidates.push(c.id.as_str());
            }
        }
    }
    for r in responses {
        let Some(task) = by_id.get(r.task_id.as_str()) else { continue };
        let Some(w) = r.winner else { continue };
        let s = sets.get_mut(task.meme_id.as_str()).unwrap();
        let entry = s.by_annotator.entry(r.annotator_id.as_str()).or_insert_with(|| {
            (0, s.candidates.iter().map(|c| (*c, 0.0)).collect(), None)
        });
        entry.0 += 1;
        let winner = match w {
            Winner::First => task.captions[0].id.as_str(),
            Winner::Second => task.captions[1].id.as_str(),
        };
        *entry.1.get_mut(winner).unwrap() += 1.0;
        if let Some(ts) = r.timestamp.as_deref() {
            if entry.2.is_none_or(|old| ts > old) {
                entry.2 = Some(ts);
            }
        }
    }
    sets
}

impl SetTally<'_> {
    fn complete(&self) -> Vec<&str> {
        self.by_annotator.iter().filter(|(_, v)| v.0 == self.pair_tasks).map(|(a, _)| *a).collect()
    }
}

/// Number of sets that are partly annotated and that have enough complete
/// annotators, respectively.
pub fn set_progress(tasks: &[AnnotationTask], responses: &[AnnotationResponse], min_annotators: usize) -> (usize, usize) {
    let mut pending = 0;
    let mut ready = 0;
    for s in tallies(tasks, responses).values() {
        let done = s.complete().len();
        if done >= min_annotators {
            ready += 1;
        } else if !s.by_annotator.is_empty() {
            pending += 1;
        }
    }
    (pending, ready)
}

/// One human record per candidate set that `min_annotators` people fully
/// compared and whose ordinal agreement on win counts exceeds the threshold.
/// The ordering sorts candidates by total pairwise wins, worst first, with
/// ties in candidate id order.
pub fn export_preferences(
    tasks: &[AnnotationTask],
    responses: &[AnnotationResponse],
    min_annotators: usize,
) -> Result<Vec<PreferenceRecord>, ServiceError> {
    if min_annotators < 2 {
        return Err(ServiceError::Validation("agreement needs at least two annotators".into()));
    }
    let mut out = Vec::new();
    for (meme, s) in tallies(tasks, responses) {
        let annotators = s.complete();
        if annotators.len() < min_annotators {
            continue;
        }
        let ratings: Vec<Vec<Option<f64>>> = annotators
            .iter()
            .map(|a| s.candidates.iter().map(|c| Some(s.by_annotator[a].1[c])).collect())
            .collect();
        let distinct: BTreeSet<u64> = ratings.iter().flatten().flatten().map(|v| v.to_bits()).collect();
        if distinct.len() < 2 {
            // everyone tied everything: no ordering to agree on
            continue;
        }
        let alpha = krippendorff_alpha(&ratings, Level::Ordinal)?;
        if alpha <= AGREEMENT_THRESHOLD {
            log::info!("{meme}: agreement {alpha:.3} too low, withheld");
            continue;
        }
        let mut totals: Vec<(f64, &str)> =
            s.candidates.iter().map(|c| (annotators.iter().map(|a| s.by_annotator[a].1[c]).sum(), *c)).collect();
        totals.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(y.1)));
        let timestamp = annotators.iter().filter_map(|a| s.by_annotator[a].2).max().map(String::from);
        let record = PreferenceRecord {
            meme_id: meme.to_string(),
            ordering: totals.into_iter().map(|(_, c)| c.to_string()).collect(),
            source: PreferenceSource::Human,
            agreement: Some(alpha),
            annotator_ids: annotators.iter().map(|a| a.to_string()).collect(),
            timestamp,
        };
        record.validate()?;
        assert!(record.usable(), "exporting a record at or below the agreement threshold");
        out.push(record);
    }
    Ok(out)
}

/// Scaled rubric means per caption over everyone who rated it.
pub fn export_rubric(tasks: &[AnnotationTask], responses: &[AnnotationResponse]) -> Result<Vec<RubricSummary>, ServiceError> {
    let rubric: BTreeMap<&str, &AnnotationTask> =
        tasks.iter().filter(|t| t.kind == TaskKind::Rubric).map(|t| (t.id.as_str(), t)).collect();
    let mut acc: BTreeMap<(&str, &str), (Vec<[f64; 4]>, Vec<String>)> = BTreeMap::new();
    for r in responses {
        let (Some(t), Some(s)) = (rubric.get(r.task_id.as_str()), r.scores) else { continue };
        let scaled = rubric_scale(&RubricScores { informativeness: s[0], relevance: s[1], creativity: s[2], humor: s[3] })?;
        let e = acc.entry((t.meme_id.as_str(), t.captions[0].id.as_str())).or_default();
        e.0.push(scaled);
        e.1.push(r.annotator_id.clone());
    }
    Ok(acc
        .into_iter()
        .map(|((meme, cand), (rows, mut who))| {
            let mut mean = [0.0; 4];
            for row in &rows {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / rows.len() as f64;
                }
            }
            who.sort();
            RubricSummary { meme_id: meme.into(), candidate_id: cand.into(), scores: mean, annotator_ids: who }
        })
        .collect())
}
