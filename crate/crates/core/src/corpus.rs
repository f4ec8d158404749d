//! Meme records, the line-delimited manifest, dataset statistics and
//! category-balanced downsampling.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encode::ChainOfHumor;
use crate::error::{Error, Result};
use crate::tokenize::{Tokenizer, WhitespacePunct};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sentiment {
    SelfPraise,
    PraiseOthers,
    SelfMockery,
    MockOthers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Structure {
    pub const ALL: [Structure; 2] = [Structure::Single, Structure::Multi];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Single => "single",
            Structure::Multi => "multi",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl Sentiment {
    pub const ALL: [Sentiment; 4] =
        [Sentiment::SelfPraise, Sentiment::PraiseOthers, Sentiment::SelfMockery, Sentiment::MockOthers];

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::SelfPraise => "self_praise",
            Sentiment::PraiseOthers => "praise_others",
            Sentiment::SelfMockery => "self_mockery",
            Sentiment::MockOthers => "mock_others",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

macro_rules! label_parsing {
    ($ty:ty, $what:literal) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                Self::ALL_LABELS
                    .iter()
                    .find(|v| v.as_str() == s)
                    .copied()
                    .ok_or_else(|| Error::Validation(format!(concat!("unknown ", $what, " label {:?}"), s)))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

impl Structure {
    const ALL_LABELS: [Structure; 2] = Structure::ALL;
}
impl Sentiment {
    const ALL_LABELS: [Sentiment; 4] = Sentiment::ALL;
}
impl Split {
    const ALL_LABELS: [Split; 2] = [Split::Train, Split::Test];
}
label_parsing!(Structure, "structure");
label_parsing!(Sentiment, "sentiment");
label_parsing!(Split, "split");

/// Sub-image rectangle, half-open: `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoiBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub index: usize,
}

impl RoiBox {
    pub fn new(index: usize, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1, index }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn overlaps(&self, other: &RoiBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn intersection_area(&self, other: &RoiBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0)) as u64;
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0)) as u64;
        w * h
    }

    pub fn iou(&self, other: &RoiBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Checks `0 ≤ x0 < x1 ≤ width` and `0 ≤ y0 < y1 ≤ height`.
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Validation(format!("ROI {} {:?} has zero area", self.index, self.coords())));
        }
        if self.x1 > width || self.y1 > height {
            return Err(Error::Validation(format!(
                "ROI {} {:?} lies outside the {width}x{height} image",
                self.index,
                self.coords()
            )));
        }
        Ok(())
    }
}

/// Rejects any pair of overlapping boxes.
pub fn check_non_overlapping(rois: &[RoiBox]) -> Result<()> {
    for (i, a) in rois.iter().enumerate() {
        for b in &rois[i + 1..] {
            if a.overlaps(b) {
                return Err(Error::Validation(format!(
                    "ROIs {} {:?} and {} {:?} overlap",
                    a.index,
                    a.coords(),
                    b.index,
                    b.coords()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemeRecord {
    pub id: String,
    /// As written in the manifest; relative paths resolve against the manifest directory.
    pub image_path: PathBuf,
    pub image_size: (u32, u32),
    pub structure: Structure,
    pub sentiment: Sentiment,
    pub caption: String,
    pub caption_tokens: Vec<String>,
    pub rois: Vec<RoiBox>,
    pub split: Split,
    /// Optional per-sub-image descriptions, aligned with `rois`.
    pub chain_of_humor: Option<Vec<ChainOfHumor>>,
}

impl MemeRecord {
    pub fn image_location(&self, manifest_dir: &Path) -> PathBuf {
        if self.image_path.is_absolute() {
            self.image_path.clone()
        } else {
            manifest_dir.join(&self.image_path)
        }
    }

    /// Checks every record invariant.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::record(&self.id, m));
        if self.caption_tokens.is_empty() {
            return fail("caption has no tokens".into());
        }
        match (self.structure, self.rois.len()) {
            (_, 0) => return fail("no ROIs".into()),
            (Structure::Single, 1) => {}
            (Structure::Single, n) => return fail(format!("single-image meme with {n} ROIs")),
            (Structure::Multi, 1) => return fail("multi-image meme with only one ROI".into()),
            (Structure::Multi, _) => {}
        }
        let (w, h) = self.image_size;
        for (i, roi) in self.rois.iter().enumerate() {
            if roi.index != i {
                return fail(format!("ROI at position {i} carries index {}", roi.index));
            }
            if let Err(e) = roi.validate(w, h) {
                return fail(e.to_string());
            }
        }
        if let Err(e) = check_non_overlapping(&self.rois) {
            return fail(e.to_string());
        }
        if let Some(coh) = &self.chain_of_humor {
            if coh.len() != self.rois.len() {
                return fail(format!("{} chain-of-humor entries for {} ROIs", coh.len(), self.rois.len()));
            }
            for c in coh {
                if let Err(e) = c.validate() {
                    return fail(e.to_string());
                }
            }
        }
        Ok(())
    }
}

/// One manifest line, exactly as serialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestLine {
    pub id: String,
    pub image_path: String,
    pub structure: String,
    pub sentiment: String,
    pub caption: String,
    pub rois: Vec<[u32; 4]>,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_of_humor: Option<Vec<ChainOfHumor>>,
}

impl From<&MemeRecord> for ManifestLine {
    fn from(r: &MemeRecord) -> Self {
        ManifestLine {
            id: r.id.clone(),
            image_path: r.image_path.to_string_lossy().into_owned(),
            structure: r.structure.to_string(),
            sentiment: r.sentiment.to_string(),
            caption: r.caption.clone(),
            rois: r.rois.iter().map(RoiBox::coords).collect(),
            split: r.split.to_string(),
            chain_of_humor: r.chain_of_humor.clone(),
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<MemeRecord>> {
    load_manifest_with(path, &WhitespacePunct)
}

/// Loads and validates every record, in file order.
pub fn load_manifest_with(path: &Path, tokenizer: &dyn Tokenizer) -> Result<Vec<MemeRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let record = record_from_line(raw, base, tokenizer)?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::record(&record.id, "duplicate id"));
        }
        records.push(record);
    }
    Ok(records)
}

fn record_from_line(raw: ManifestLine, base: &Path, tokenizer: &dyn Tokenizer) -> Result<MemeRecord> {
    let id = raw.id.clone();
    let label_err = |e: Error| Error::record(&id, e.to_string());
    let structure: Structure = raw.structure.parse().map_err(label_err)?;
    let sentiment: Sentiment = raw.sentiment.parse().map_err(label_err)?;
    let split: Split = raw.split.parse().map_err(label_err)?;
    let image_path = PathBuf::from(&raw.image_path);
    let location = if image_path.is_absolute() { image_path.clone() } else { base.join(&image_path) };
    if !location.exists() {
        return Err(Error::record(&id, format!("image file {} not found", location.display())));
    }
    let image_size = image::image_dimensions(&location)
        .map_err(|e| Error::record(&id, format!("cannot read image {}: {e}", location.display())))?;
    let rois = raw
        .rois
        .iter()
        .enumerate()
        .map(|(i, c)| RoiBox::new(i, c[0], c[1], c[2], c[3]))
        .collect();
    let record = MemeRecord {
        caption_tokens: tokenizer.tokenize(&raw.caption),
        id: raw.id,
        image_path,
        image_size,
        structure,
        sentiment,
        caption: raw.caption,
        rois,
        split,
        chain_of_humor: raw.chain_of_humor,
    };
    record.validate()?;
    Ok(record)
}

/// Serializes records one JSON object per line.
pub fn manifest_to_string(records: &[MemeRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&ManifestLine::from(r)).expect("manifest line serializes"));
        out.push('\n');
    }
    out
}

pub fn save_manifest(path: &Path, records: &[MemeRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(manifest_to_string(records).as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub count: usize,
    pub avg: f64,
    pub max: usize,
    pub min: usize,
}

impl TokenStats {
    fn from_lengths(lengths: impl Iterator<Item = usize>) -> Option<TokenStats> {
        let mut count = 0usize;
        let mut total = 0usize;
        let mut max = 0usize;
        let mut min = usize::MAX;
        for l in lengths {
            count += 1;
            total += l;
            max = max.max(l);
            min = min.min(l);
        }
        (count > 0).then(|| TokenStats { count, avg: total as f64 / count as f64, max, min })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentStats {
    pub sentiment: Sentiment,
    pub fraction: f64,
    pub tokens: Option<TokenStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count_total: usize,
    pub fraction_single: f64,
    pub fraction_multi: f64,
    pub tokens: TokenStats,
    /// In [`Sentiment::ALL`] order.
    pub per_sentiment: Vec<SentimentStats>,
}

impl CorpusStats {
    pub fn sentiment(&self, s: Sentiment) -> &SentimentStats {
        &self.per_sentiment[s.index()]
    }
}

pub fn compute_stats(records: &[MemeRecord]) -> Result<CorpusStats> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot compute statistics of an empty corpus".into()));
    }
    let n = records.len();
    let singles = records.iter().filter(|r| r.structure == Structure::Single).count();
    let tokens = TokenStats::from_lengths(records.iter().map(|r| r.caption_tokens.len())).expect("non-empty");
    let per_sentiment = Sentiment::ALL
        .iter()
        .map(|&s| {
            let of_s = || records.iter().filter(move |r| r.sentiment == s);
            SentimentStats {
                sentiment: s,
                fraction: of_s().count() as f64 / n as f64,
                tokens: TokenStats::from_lengths(of_s().map(|r| r.caption_tokens.len())),
            }
        })
        .collect();
    Ok(CorpusStats {
        count_total: n,
        fraction_single: singles as f64 / n as f64,
        fraction_multi: (n - singles) as f64 / n as f64,
        tokens,
        per_sentiment,
    })
}

/// Target marginals for [`balance_downsample`]; `None` leaves an axis free.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetFractions {
    /// `[single, multi]`
    pub structure: Option<[f64; 2]>,
    /// In [`Sentiment::ALL`] order.
    pub sentiment: Option<[f64; 4]>,
}

fn check_axis(name: &str, fractions: &[f64]) -> Result<()> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::InvalidArgument(format!("{name} fractions must be non-negative")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{name} fractions sum to {total}, expected 1")));
    }
    Ok(())
}

/// Largest-remainder apportionment of `total` over `fractions`.
fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Edmonds-Karp on the tiny structure → stratum → sentiment network. Returns
/// the per-stratum flow when all `total` units can be routed.
fn route_strata(avail: &[[usize; 4]; 2], rows: &[usize; 2], cols: &[usize; 4]) -> Option<[[usize; 4]; 2]> {
    // nodes: 0 source, 1..=2 structure, 3..=6 sentiment, 7 sink
    const N: usize = 8;
    let mut cap = [[0usize; N]; N];
    for s in 0..2 {
        cap[0][1 + s] = rows[s];
        for t in 0..4 {
            cap[1 + s][3 + t] = avail[s][t];
        }
    }
    for t in 0..4 {
        cap[3 + t][7] = cols[t];
    }
    let original = cap;
    let mut flow = 0usize;
    loop {
        let mut parent = [usize::MAX; N];
        parent[0] = 0;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for v in 0..N {
                if parent[v] == usize::MAX && cap[u][v] > 0 {
                    parent[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if parent[7] == usize::MAX {
            break;
        }
        let mut push = usize::MAX;
        let mut v = 7;
        while v != 0 {
            push = push.min(cap[parent[v]][v]);
            v = parent[v];
        }
        let mut v = 7;
        while v != 0 {
            cap[parent[v]][v] -= push;
            cap[v][parent[v]] += push;
            v = parent[v];
        }
        flow += push;
    }
    let wanted: usize = rows.iter().sum::<usize>().min(cols.iter().sum());
    if flow < wanted {
        return None;
    }
    let mut out = [[0usize; 4]; 2];
    for s in 0..2 {
        for t in 0..4 {
            out[s][t] = original[1 + s][3 + t] - cap[1 + s][3 + t];
        }
    }
    Some(out)
}

/// Largest subset of `records` whose structure/sentiment marginals match
/// `targets`, drawn deterministically from `seed`. Output keeps input order.
pub fn balance_downsample(records: &[MemeRecord], targets: &TargetFractions, seed: u64) -> Result<Vec<MemeRecord>> {
    if let Some(f) = &targets.structure {
        check_axis("structure", f)?;
    }
    if let Some(f) = &targets.sentiment {
        check_axis("sentiment", f)?;
    }
    let mut avail = [[0usize; 4]; 2];
    for r in records {
        avail[r.structure.index()][r.sentiment.index()] += 1;
    }
    let row_avail: [usize; 2] = [avail[0].iter().sum(), avail[1].iter().sum()];
    let col_avail: [usize; 4] = std::array::from_fn(|t| avail[0][t] + avail[1][t]);

    let mut missing = Vec::new();
    if let Some(f) = &targets.structure {
        for (s, st) in Structure::ALL.iter().enumerate() {
            if f[s] > 0.0 && row_avail[s] == 0 {
                missing.push(st.as_str());
            }
        }
    }
    if let Some(f) = &targets.sentiment {
        for (t, se) in Sentiment::ALL.iter().enumerate() {
            if f[t] > 0.0 && col_avail[t] == 0 {
                missing.push(se.as_str());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!("requested categories absent from input: {}", missing.join(", "))));
    }

    let total = records.len();
    let bound = |avail: &[usize], fractions: &[f64]| {
        avail
            .iter()
            .zip(fractions)
            .filter(|(_, &f)| f > 0.0)
            .map(|(&a, &f)| ((a as f64 + 1e-9) / f).floor() as usize)
            .min()
            .unwrap_or(0)
    };
    let mut upper = total;
    if let Some(f) = &targets.structure {
        upper = upper.min(bound(&row_avail, f));
    }
    if let Some(f) = &targets.sentiment {
        upper = upper.min(bound(&col_avail, f));
    }

    let mut plan = None;
    for m in (1..=upper).rev() {
        let rows: [usize; 2] = match &targets.structure {
            Some(f) => apportion(m, f).try_into().expect("2 categories"),
            None => [m, m],
        };
        let cols: [usize; 4] = match &targets.sentiment {
            Some(f) => apportion(m, f).try_into().expect("4 categories"),
            None => [m; 4],
        };
        if let Some(strata) = route_strata(&avail, &rows, &cols) {
            if strata.iter().flatten().sum::<usize>() == m {
                plan = Some(strata);
                break;
            }
        }
    }
    let plan = plan.ok_or_else(|| Error::InvalidArgument("no non-empty subset satisfies the targets".into()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; total];
    for s in Structure::ALL {
        for t in Sentiment::ALL {
            let mut members: Vec<usize> = records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.structure == s && r.sentiment == t)
                .map(|(i, _)| i)
                .collect();
            let want = plan[s.index()][t.index()];
            if want < members.len() {
                members.shuffle(&mut rng);
            }
            for &i in members.iter().take(want) {
                keep[i] = true;
            }
        }
    }
    Ok(records.iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r.clone()).collect())
}
