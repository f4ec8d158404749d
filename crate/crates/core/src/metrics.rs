//! Caption metrics, rubric scaling and the composite score.
//!
//! METEOR here is the exact-match stage only: no stemming, no synonyms.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    pub score: f64,
    /// Set when the candidate was empty; the score is then 0.
    pub empty_candidate: bool,
}

/// Corpus-free sentence BLEU against several references: clipped n-gram
/// precisions for `n = 1..=max_n`, geometric mean, brevity penalty against
/// the closest reference length (shorter on ties). A zero precision for
/// `n ≥ 2` becomes `(0 + 1)/(total + 1)`.
pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> Result<Bleu> {
    if references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(Error::InvalidArgument("BLEU needs non-empty references".into()));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("BLEU order must be positive".into()));
    }
    if candidate.is_empty() {
        return Ok(Bleu { score: 0.0, empty_candidate: true });
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngrams(candidate, n);
        let total: usize = cand.values().sum();
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = cand.iter().map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n >= 2 {
            1.0 / (total + 1) as f64
        } else {
            return Ok(Bleu { score: 0.0, empty_candidate: false });
        };
        log_sum += p.ln();
    }
    let c = candidate.len();
    let r = references.iter().map(|r| r.len()).min_by_key(|&len| (len.abs_diff(c), len)).unwrap();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(Bleu { score: bp * (log_sum / max_n as f64).exp(), empty_candidate: false })
}

pub fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure with recall weighted by `β = 1.2`.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument("ROUGE-L needs non-empty sequences".into()));
    }
    let l = lcs_length(candidate, reference) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

/// Sparse tf-idf vector of one n-gram order.
type TfIdf<'a> = BTreeMap<&'a [String], f64>;

fn tfidf<'a>(tokens: &'a [String], n: usize, idf: &dyn Fn(&[String]) -> f64) -> TfIdf<'a> {
    ngrams(tokens, n).into_iter().map(|(g, c)| (g, c as f64 * idf(g))).collect()
}

fn sparse_cosine(a: &TfIdf<'_>, b: &TfIdf<'_>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub const CIDER_MAX_N: usize = 4;

/// Per-meme CIDEr: for each order `n ≤ 4`, the mean over references of the
/// cosine between count·idf vectors, with `idf = ln(M) − ln(max(1, df))` and
/// `df` the number of memes whose references contain the n-gram; the four
/// orders are averaged and multiplied by 10.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!("{} candidates for {} reference sets", candidates.len(), references.len())));
    }
    let m = references.len();
    if m < 2 {
        return Err(Error::InvalidArgument("CIDEr needs at least two memes for document frequencies".into()));
    }
    if references.iter().any(|r| r.is_empty() || r.iter().any(|x| x.is_empty())) {
        return Err(Error::InvalidArgument("CIDEr needs non-empty references for every meme".into()));
    }
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for refs in references {
        let mut seen: std::collections::HashSet<&[String]> = std::collections::HashSet::new();
        for r in refs {
            for n in 1..=CIDER_MAX_N {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_m = (m as f64).ln();
    let idf = |g: &[String]| log_m - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| {
            let mut total = 0.0;
            for n in 1..=CIDER_MAX_N {
                let vc = tfidf(c, n, &idf);
                let s: f64 = refs.iter().map(|r| sparse_cosine(&vc, &tfidf(r, n, &idf))).sum();
                total += s / refs.len() as f64;
            }
            10.0 * total / CIDER_MAX_N as f64
        })
        .collect())
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;
/// Search budget for the fewest-chunk alignment; past it the best alignment
/// found so far is used.
const METEOR_SEARCH_NODES: usize = 200_000;

fn chunks(alignment: &[(usize, usize)]) -> usize {
    let mut c = 0;
    for (i, &(a, b)) in alignment.iter().enumerate() {
        if i == 0 || alignment[i - 1] != (a - 1, b.wrapping_sub(1)) {
            c += 1;
        }
    }
    c
}

struct AlignSearch<'a> {
    cand: &'a [String],
    positions: HashMap<&'a str, Vec<usize>>,
    remaining: HashMap<&'a str, usize>,
    target: usize,
    used: Vec<bool>,
    path: Vec<(usize, usize)>,
    best: Option<(usize, Vec<(usize, usize)>)>,
    nodes: usize,
}

impl<'a> AlignSearch<'a> {
    /// Visits candidate positions in order; each word keeps exactly as many
    /// matches as it can have, so every complete path is a maximum matching.
    fn run(&mut self, i: usize) {
        self.nodes += 1;
        if self.nodes > METEOR_SEARCH_NODES {
            return;
        }
        let partial = chunks(&self.path);
        if let Some((best, _)) = &self.best {
            if partial >= *best {
                return;
            }
        }
        if i == self.cand.len() {
            if self.path.len() == self.target {
                self.best = Some((partial, self.path.clone()));
            }
            return;
        }
        let w = self.cand[i].as_str();
        let left_in_cand = self.cand[i..].iter().filter(|x| x.as_str() == w).count();
        let need = self.remaining.get(w).copied().unwrap_or(0);
        if need > 0 {
            let mut options: Vec<usize> = self.positions[w].iter().copied().filter(|&p| !self.used[p]).collect();
            // try extending the current chunk first
            if let Some(&(_, last)) = self.path.last() {
                options.sort_by_key(|&p| (p != last + 1, p));
            }
            for p in options {
                self.used[p] = true;
                self.path.push((i, p));
                *self.remaining.get_mut(w).unwrap() -= 1;
                self.run(i + 1);
                *self.remaining.get_mut(w).unwrap() += 1;
                self.path.pop();
                self.used[p] = false;
            }
        }
        if left_in_cand > need {
            self.run(i + 1);
        }
    }
}

/// Exact-match METEOR: maximum unigram matching with the fewest chunks,
/// `F = P·R / (α·P + (1 − α)·R)`, penalty `γ·(chunks/matches)^β`.
pub fn meteor(candidate: &[String], reference: &[String]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument("METEOR needs non-empty sequences".into()));
    }
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in reference.iter().enumerate() {
        positions.entry(w.as_str()).or_default().push(j);
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for w in candidate {
        *cand_counts.entry(w.as_str()).or_insert(0) += 1;
    }
    let remaining: HashMap<&str, usize> =
        cand_counts.iter().map(|(w, c)| (*w, (*c).min(positions.get(w).map_or(0, Vec::len)))).collect();
    let matches: usize = remaining.values().sum();
    if matches == 0 {
        return Ok(0.0);
    }
    let mut search = AlignSearch {
        cand: candidate,
        positions,
        remaining,
        target: matches,
        used: vec![false; reference.len()],
        path: Vec::new(),
        best: None,
        nodes: 0,
    };
    search.run(0);
    let ch = search.best.map(|(c, _)| c).unwrap_or(matches);
    let m = matches as f64;
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    Ok(f * (1.0 - METEOR_GAMMA * (ch as f64 / m).powf(METEOR_BETA)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricScores {
    pub informativeness: u8,
    pub relevance: u8,
    pub creativity: u8,
    pub humor: u8,
}

impl RubricScores {
    pub fn as_array(&self) -> [u8; 4] {
        [self.informativeness, self.relevance, self.creativity, self.humor]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.as_array().into_iter().find(|v| !(1..=5).contains(v)) {
            return Err(Error::Validation(format!("rubric score {bad} outside 1..=5")));
        }
        Ok(())
    }
}

pub const RUBRIC_SCALE: f64 = 20.0;

/// Rubric scores on the 20–100 scale, in the order informativeness,
/// relevance, creativity, humor.
pub fn rubric_scale(raw: &RubricScores) -> Result<[f64; 4]> {
    raw.validate()?;
    Ok(raw.as_array().map(|v| v as f64 * RUBRIC_SCALE))
}

/// Round half up at two decimals. The tiny offset keeps decimal ties such as
/// 57.225, which binary stores just below the tie, rounding up.
pub fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5 + 1e-7).floor() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Composite {
    pub h_average: Option<f64>,
    pub m_average: f64,
    pub average: f64,
}

impl Composite {
    pub fn rounded(&self) -> Composite {
        Composite { h_average: self.h_average.map(round2), m_average: round2(self.m_average), average: round2(self.average) }
    }
}

fn check_percent(values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !(0.0..=100.0).contains(*v)) {
        return Err(Error::Validation(format!("score {v} outside [0, 100]")));
    }
    Ok(())
}

/// Means of the four human and four automatic scores and their mean.
/// Unrounded; see [`Composite::rounded`].
pub fn composite_score(human: &[f64; 4], auto: &[f64; 4]) -> Result<Composite> {
    check_percent(human)?;
    check_percent(auto)?;
    let h = human.iter().sum::<f64>() / 4.0;
    let m = auto.iter().sum::<f64>() / 4.0;
    Ok(Composite { h_average: Some(h), m_average: m, average: (h + m) / 2.0 })
}

/// Without human ratings the average is the automatic mean.
pub fn composite_auto_only(auto: &[f64; 4]) -> Result<Composite> {
    check_percent(auto)?;
    let m = auto.iter().sum::<f64>() / 4.0;
    Ok(Composite { h_average: None, m_average: m, average: m })
}

/// Automatic scores on the 0–100 reporting scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoScores {
    pub bleu: f64,
    pub rouge_l: f64,
    /// Raw CIDEr × 10, so a perfect tf-idf match is 100.
    pub cider: f64,
    pub meteor: f64,
}

impl AutoScores {
    pub fn as_array(&self) -> [f64; 4] {
        [self.bleu, self.rouge_l, self.cider, self.meteor]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemeScores {
    pub meme_id: String,
    /// Group label, e.g. `single` or `multi`.
    pub group: String,
    pub candidate: String,
    pub reference: String,
    pub auto: AutoScores,
    /// Mean scaled rubric scores, when people rated this caption.
    #[serde(default)]
    pub human: Option<[f64; 4]>,
    #[serde(default)]
    pub empty_candidate: bool,
}

/// Scores single-reference captions. `group` labels each meme for the summary.
pub fn score_corpus(
    ids: &[String],
    groups: &[String],
    candidates: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<Vec<MemeScores>> {
    let n = ids.len();
    if groups.len() != n || candidates.len() != n || references.len() != n {
        return Err(Error::Shape("ids, groups, candidates and references differ in length".into()));
    }
    let refs: Vec<Vec<Vec<String>>> = references.iter().map(|r| vec![r.clone()]).collect();
    let cider_scores = cider(candidates, &refs)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let b = bleu(&candidates[i], &refs[i], 4)?;
        let (rouge, met) = if candidates[i].is_empty() {
            (0.0, 0.0)
        } else {
            (rouge_l(&candidates[i], &references[i])?, meteor(&candidates[i], &references[i])?)
        };
        out.push(MemeScores {
            meme_id: ids[i].clone(),
            group: groups[i].clone(),
            candidate: candidates[i].join(" "),
            reference: references[i].join(" "),
            auto: AutoScores { bleu: 100.0 * b.score, rouge_l: 100.0 * rouge, cider: 10.0 * cider_scores[i], meteor: 100.0 * met },
            human: None,
            empty_candidate: b.empty_candidate,
        });
    }
    Ok(out)
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub count: usize,
    pub human: Option<[f64; 4]>,
    pub h_average: Option<f64>,
    pub auto: [f64; 4],
    pub m_average: f64,
    pub average: f64,
    pub human_available: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub memes: Vec<MemeScores>,
    /// One row per group in name order, then `all`.
    pub summary: Vec<SummaryRow>,
    pub meteor_variant: String,
}

fn mean4(rows: &[[f64; 4]]) -> [f64; 4] {
    let mut m = [0.0; 4];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b / rows.len() as f64;
        }
    }
    m
}

fn summary_row(group: &str, memes: &[&MemeScores]) -> Result<SummaryRow> {
    let auto = mean4(&memes.iter().map(|m| m.auto.as_array()).collect::<Vec<_>>());
    let rated: Vec<[f64; 4]> = memes.iter().filter_map(|m| m.human).collect();
    let human = (!rated.is_empty()).then(|| mean4(&rated));
    let c = match &human {
        Some(h) => composite_score(h, &auto)?,
        None => composite_auto_only(&auto)?,
    };
    Ok(SummaryRow {
        group: group.to_string(),
        count: memes.len(),
        human,
        h_average: c.h_average,
        auto,
        m_average: c.m_average,
        average: c.average,
        human_available: human.is_some(),
    })
}

impl EvaluationReport {
    pub fn new(memes: Vec<MemeScores>) -> Result<EvaluationReport> {
        if memes.is_empty() {
            return Err(Error::InvalidArgument("nothing to report".into()));
        }
        let mut groups: BTreeMap<&str, Vec<&MemeScores>> = BTreeMap::new();
        for m in &memes {
            groups.entry(m.group.as_str()).or_default().push(m);
        }
        let mut summary = groups.iter().map(|(g, ms)| summary_row(g, ms)).collect::<Result<Vec<_>>>()?;
        summary.push(summary_row("all", &memes.iter().collect::<Vec<_>>())?);
        Ok(EvaluationReport { memes, summary, meteor_variant: "exact-match only".into() })
    }

    /// Per-meme lines followed by one `{"summary": …}` line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.memes {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        let tail = serde_json::json!({ "summary": self.summary, "meteor_variant": self.meteor_variant });
        out.push_str(&serde_json::to_string(&tail)?);
        out.push('\n');
        Ok(out)
    }

    /// Summary table, rounded to two decimals; human columns are empty when
    /// nobody rated the group.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,count,Info,Rele,Crea,Humo,HAverage,BLEU,ROUGE,CIDEr,METEOR,MAverage,Average\n");
        let f = |x: f64| format!("{:.2}", round2(x));
        for r in &self.summary {
            let human: Vec<String> = match r.human {
                Some(h) => h.iter().map(|v| f(*v)).collect(),
                None => vec![String::new(); 4],
            };
            let auto: Vec<String> = r.auto.iter().map(|v| f(*v)).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.group,
                r.count,
                human.join(","),
                r.h_average.map(f).unwrap_or_default(),
                auto.join(","),
                f(r.m_average),
                f(r.average)
            );
        }
        out
    }
}
