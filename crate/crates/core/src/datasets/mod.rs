//! Rating-log ingestion, filtering, leave-one-out splitting and negative sampling.

pub mod fixture;

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub timestamp: i64,
}

/// A tagged attribute such as `genre:War`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attribute {
    pub kind: String,
    pub value: String,
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemDescription {
    pub item_id: String,
    pub title: String,
    pub text: String,
    pub attributes: Vec<Attribute>,
}

impl ItemDescription {
    pub fn placeholder(item_id: &str) -> Self {
        Self { item_id: item_id.to_string(), title: item_id.to_string(), text: item_id.to_string(), attributes: vec![] }
    }

    pub fn has_value(&self, value: &str) -> bool {
        self.attributes.iter().any(|a| a.value == value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    MovielensDat,
    AmazonJsonl,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub total_lines: usize,
    pub records: usize,
    pub malformed_lines: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Loaded {
    pub interactions: Vec<Interaction>,
    pub catalog: Vec<ItemDescription>,
    pub report: LoadReport,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Item metadata file; for movielens defaults to `movies.dat` beside the ratings.
    pub meta: Option<PathBuf>,
    pub max_malformed_frac: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { meta: None, max_malformed_frac: 0.01 }
    }
}

/// Movielens files are Latin-1; anything that is not valid UTF-8 is decoded byte-per-char.
fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).at(path)?;
    Ok(match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => e.into_bytes().iter().map(|&b| b as char).collect(),
    })
}

pub fn parse_movielens_rating(line: &str) -> Option<Interaction> {
    let mut f = line.trim_end_matches('\r').split("::");
    let user_id = f.next()?.trim();
    let item_id = f.next()?.trim();
    let rating: f64 = f.next()?.trim().parse().ok()?;
    let timestamp: i64 = f.next()?.trim().parse().ok()?;
    if f.next().is_some() || user_id.is_empty() || item_id.is_empty() || !(0.0..=5.0).contains(&rating) || timestamp < 0 {
        return None;
    }
    Some(Interaction { user_id: user_id.into(), item_id: item_id.into(), rating, timestamp })
}

/// `MovieID::Title (Year)::Genre|Genre`.
pub fn parse_movielens_movie(line: &str) -> Option<ItemDescription> {
    let mut f = line.trim_end_matches('\r').splitn(3, "::");
    let item_id = f.next()?.trim().to_string();
    let title = f.next()?.trim().to_string();
    let genres = f.next()?.trim();
    if item_id.is_empty() {
        return None;
    }
    let attributes: Vec<Attribute> = genres
        .split('|')
        .filter(|g| !g.is_empty() && *g != "(no genres listed)")
        .map(|g| Attribute { kind: "genre".into(), value: g.trim().to_string() })
        .collect();
    let names: Vec<&str> = attributes.iter().map(|a| a.value.as_str()).collect();
    let text = if names.is_empty() { title.clone() } else { format!("{title}. Genres: {}.", names.join(", ")) };
    Some(ItemDescription { item_id, title, text, attributes })
}

fn json_str(v: &serde_json::Value, keys: &[&str]) -> Option<String> {
    keys.iter().find_map(|k| match v.get(k)? {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    })
}

fn json_f64(v: &serde_json::Value, keys: &[&str]) -> Option<f64> {
    keys.iter().find_map(|k| match v.get(k)? {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.parse().ok(),
        _ => None,
    })
}

/// One review object per line. Millisecond timestamps (newer dumps) are
/// converted to seconds.
pub fn parse_amazon_review(line: &str) -> Option<Interaction> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    let user_id = json_str(&v, &["user_id", "reviewerID"])?;
    let item_id = json_str(&v, &["parent_asin", "asin"])?;
    let rating = json_f64(&v, &["rating", "overall"])?;
    let mut ts = json_f64(&v, &["timestamp", "unixReviewTime"])? as i64;
    if ts > 100_000_000_000 {
        ts /= 1000;
    }
    if !(0.0..=5.0).contains(&rating) || ts < 0 || user_id.is_empty() || item_id.is_empty() {
        return None;
    }
    Some(Interaction { user_id, item_id, rating, timestamp: ts })
}

pub fn parse_amazon_meta(line: &str) -> Option<ItemDescription> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    let item_id = json_str(&v, &["parent_asin", "asin"])?;
    let title = json_str(&v, &["title"]).unwrap_or_else(|| item_id.clone());
    let mut attributes = Vec::new();
    let mut push_cats = |val: &serde_json::Value| {
        if let Some(arr) = val.as_array() {
            for c in arr {
                match c {
                    serde_json::Value::String(s) if !s.is_empty() => {
                        attributes.push(Attribute { kind: "category".into(), value: s.clone() })
                    }
                    serde_json::Value::Array(inner) => {
                        for s in inner.iter().filter_map(|x| x.as_str()) {
                            attributes.push(Attribute { kind: "category".into(), value: s.to_string() });
                        }
                    }
                    _ => {}
                }
            }
        }
    };
    for key in ["categories", "category"] {
        if let Some(c) = v.get(key) {
            push_cats(c);
        }
    }
    let mut seen = HashSet::new();
    attributes.retain(|a| seen.insert(a.clone()));
    let desc = match v.get("description") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(serde_json::Value::Array(a)) => a.iter().filter_map(|x| x.as_str()).collect::<Vec<_>>().join(" "),
        _ => String::new(),
    };
    let text = if desc.is_empty() { title.clone() } else { format!("{title}. {desc}") };
    Some(ItemDescription { item_id, title, text, attributes })
}

fn parse_lines<T>(
    path: &Path,
    text: &str,
    max_frac: f64,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<(Vec<T>, LoadReport)> {
    let mut out = Vec::new();
    let mut report = LoadReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.total_lines += 1;
        match parse(line) {
            Some(r) => out.push(r),
            None => report.malformed_lines.push(i + 1),
        }
    }
    report.records = out.len();
    if report.total_lines > 0 && report.malformed_lines.len() as f64 > max_frac * report.total_lines as f64 {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            malformed: report.malformed_lines.len(),
            total: report.total_lines,
            lines: report.malformed_lines.iter().take(20).copied().collect(),
        });
    }
    if !report.malformed_lines.is_empty() {
        tracing::warn!(path = %path.display(), count = report.malformed_lines.len(), "skipped malformed lines");
    }
    Ok((out, report))
}

/// Reads interactions and the item catalog.
pub fn load_ratings(path: &Path, format: Format, opts: &LoadOptions) -> Result<Loaded> {
    let text = read_text(path)?;
    let (interactions, report) = match format {
        Format::MovielensDat => parse_lines(path, &text, opts.max_malformed_frac, parse_movielens_rating)?,
        Format::AmazonJsonl => parse_lines(path, &text, opts.max_malformed_frac, parse_amazon_review)?,
    };
    let meta = opts.meta.clone().or_else(|| match format {
        Format::MovielensDat => Some(path.with_file_name("movies.dat")).filter(|p| p.exists()),
        Format::AmazonJsonl => None,
    });
    let catalog = match meta {
        None => vec![],
        Some(m) => {
            let text = read_text(&m)?;
            match format {
                Format::MovielensDat => parse_lines(&m, &text, opts.max_malformed_frac, parse_movielens_movie)?.0,
                Format::AmazonJsonl => parse_lines(&m, &text, opts.max_malformed_frac, parse_amazon_meta)?.0,
            }
        }
    };
    Ok(Loaded { interactions, catalog, report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_user_inter: usize,
    pub min_item_inter: usize,
    /// Ratings strictly above this value are positives.
    pub positive_above: f64,
    /// Repeat the item and user passes until nothing changes.
    pub to_fixpoint: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { min_user_inter: 30, min_item_inter: 10, positive_above: 3.0, to_fixpoint: false }
    }
}

/// Keeps positives, then drops rare items, then drops light users.
pub fn filter(interactions: &[Interaction], cfg: &FilterConfig) -> Vec<Interaction> {
    let mut out: Vec<Interaction> = interactions.iter().filter(|x| x.rating > cfg.positive_above).cloned().collect();
    loop {
        let before = out.len();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for x in &out {
            *item_counts.entry(&x.item_id).or_default() += 1;
        }
        let keep_item: HashSet<String> =
            item_counts.into_iter().filter(|(_, c)| *c >= cfg.min_item_inter).map(|(k, _)| k.to_string()).collect();
        out.retain(|x| keep_item.contains(&x.item_id));
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        for x in &out {
            *user_counts.entry(&x.user_id).or_default() += 1;
        }
        let keep_user: HashSet<String> =
            user_counts.into_iter().filter(|(_, c)| *c >= cfg.min_user_inter).map(|(k, _)| k.to_string()).collect();
        out.retain(|x| keep_user.contains(&x.user_id));
        if !cfg.to_fixpoint || out.len() == before {
            return out;
        }
    }
}

/// Numeric ids sort numerically and before non-numeric ids, which sort lexically.
pub fn id_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub density: f64,
}

impl DatasetStats {
    pub fn of(interactions: &[Interaction]) -> Self {
        let users: HashSet<&str> = interactions.iter().map(|x| x.user_id.as_str()).collect();
        let items: HashSet<&str> = interactions.iter().map(|x| x.item_id.as_str()).collect();
        let denom = users.len() * items.len();
        Self {
            n_users: users.len(),
            n_items: items.len(),
            n_interactions: interactions.len(),
            density: if denom == 0 { 0.0 } else { interactions.len() as f64 / denom as f64 },
        }
    }
}

/// One user's chronological training events, as dense item indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
    /// Position of each event in the filtered input, the global tie-breaker.
    pub order: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestEvent {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
    pub order: usize,
}

/// A training interaction in global chronological order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
    pub order: usize,
    /// Index of this event within the user's sequence.
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub user_ids: Vec<String>,
    /// Dense item index -> description, ordered by [`id_cmp`].
    pub catalog: Vec<ItemDescription>,
    /// Indexed by dense user index.
    pub train: Vec<UserSequence>,
    /// Indexed by dense user index.
    pub test: Vec<TestEvent>,
    pub stats: DatasetStats,
    pub excluded_users: usize,
}

impl SplitDataset {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.catalog.len()
    }

    pub fn item_index(&self, item_id: &str) -> Option<usize> {
        self.catalog.binary_search_by(|d| id_cmp(&d.item_id, item_id)).ok()
    }

    pub fn user_index(&self, user_id: &str) -> Option<usize> {
        self.user_ids.binary_search_by(|u| id_cmp(u, user_id)).ok()
    }

    /// Every item the user ever interacted with, train and test.
    pub fn history_set(&self, user: usize) -> HashSet<usize> {
        let mut s: HashSet<usize> = self.train[user].items.iter().copied().collect();
        s.insert(self.test[user].item);
        s
    }

    /// All training events sorted by `(timestamp, input order)`.
    pub fn chronological_train(&self) -> Vec<TrainEvent> {
        let mut ev: Vec<TrainEvent> = self
            .train
            .iter()
            .flat_map(|s| {
                (0..s.items.len()).map(move |p| TrainEvent {
                    user: s.user,
                    item: s.items[p],
                    timestamp: s.timestamps[p],
                    order: s.order[p],
                    position: p,
                })
            })
            .collect();
        ev.sort_by_key(|e| (e.timestamp, e.order));
        ev
    }

    pub fn train_interactions(&self) -> usize {
        self.train.iter().map(|s| s.items.len()).sum()
    }
}

/// Holds out each user's most recent interaction; equal timestamps resolve to
/// the record read last.
pub fn leave_one_out_split(interactions: &[Interaction], catalog: &[ItemDescription]) -> SplitDataset {
    let stats = DatasetStats::of(interactions);
    let mut per_user: BTreeMap<UserKey, Vec<usize>> = BTreeMap::new();
    for (i, x) in interactions.iter().enumerate() {
        per_user.entry(UserKey(x.user_id.clone())).or_default().push(i);
    }
    let mut item_ids: Vec<&str> = interactions.iter().map(|x| x.item_id.as_str()).collect();
    item_ids.sort_by(|a, b| id_cmp(a, b));
    item_ids.dedup();
    let by_id: HashMap<&str, &ItemDescription> = catalog.iter().map(|d| (d.item_id.as_str(), d)).collect();
    let catalog: Vec<ItemDescription> = item_ids
        .iter()
        .map(|id| by_id.get(id).map(|d| (*d).clone()).unwrap_or_else(|| ItemDescription::placeholder(id)))
        .collect();
    let index: HashMap<&str, usize> = item_ids.iter().enumerate().map(|(k, id)| (*id, k)).collect();

    let mut user_ids = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut excluded = 0;
    for (UserKey(uid), mut idx) in per_user {
        if idx.len() < 2 {
            excluded += 1;
            continue;
        }
        idx.sort_by_key(|&i| (interactions[i].timestamp, i));
        let last = idx.pop().expect("at least two events");
        let user = user_ids.len();
        user_ids.push(uid);
        let item = |i: usize| index[interactions[i].item_id.as_str()];
        train.push(UserSequence {
            user,
            items: idx.iter().map(|&i| item(i)).collect(),
            timestamps: idx.iter().map(|&i| interactions[i].timestamp).collect(),
            order: idx.clone(),
        });
        test.push(TestEvent { user, item: item(last), timestamp: interactions[last].timestamp, order: last });
    }
    if excluded > 0 {
        tracing::warn!(excluded, "users with a single interaction left out of the split");
    }
    SplitDataset { user_ids, catalog, train, test, stats, excluded_users: excluded }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct UserKey(String);

impl PartialOrd for UserKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for UserKey {
    fn cmp(&self, other: &Self) -> Ordering {
        id_cmp(&self.0, &other.0)
    }
}

/// Uniform sample without replacement from items outside `history`.
pub fn sample_negatives<R: Rng + ?Sized>(
    history: &HashSet<usize>,
    n_items: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..n_items).filter(|i| !history.contains(i)).collect();
    if count > eligible.len() {
        return Err(Error::InfeasibleSample { count, available: eligible.len() });
    }
    Ok(rand::seq::index::sample(rng, eligible.len(), count).into_iter().map(|k| eligible[k]).collect())
}

const SPLIT_FILE: &str = "interactions.tsv";
const ITEMS_FILE: &str = "items.tsv";
const STATS_FILE: &str = "stats.json";
const SPLIT_HEADER: &str = "user_id\titem_id\ttimestamp\tpart\torder";
const ITEMS_HEADER: &str = "item_id\ttitle\tattributes\ttext";

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// Writes `interactions.tsv`, `items.tsv` and `stats.json` into `dir`.
///
/// `interactions.tsv` columns: `user_id, item_id, timestamp, part (train|test), order`.
/// `items.tsv` columns: `item_id, title, attributes (kind:value joined by |), text`.
pub fn write_split(dir: &Path, split: &SplitDataset) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let p = dir.join(SPLIT_FILE);
    let mut w = std::io::BufWriter::new(std::fs::File::create(&p).at(&p)?);
    writeln!(w, "{SPLIT_HEADER}").at(&p)?;
    for (u, seq) in split.train.iter().enumerate() {
        let uid = &split.user_ids[u];
        for k in 0..seq.items.len() {
            let item = &split.catalog[seq.items[k]].item_id;
            writeln!(w, "{uid}\t{item}\t{}\ttrain\t{}", seq.timestamps[k], seq.order[k]).at(&p)?;
        }
        let t = &split.test[u];
        writeln!(w, "{uid}\t{}\t{}\ttest\t{}", split.catalog[t.item].item_id, t.timestamp, t.order).at(&p)?;
    }
    w.flush().at(&p)?;
    let p = dir.join(ITEMS_FILE);
    let mut w = std::io::BufWriter::new(std::fs::File::create(&p).at(&p)?);
    writeln!(w, "{ITEMS_HEADER}").at(&p)?;
    for d in &split.catalog {
        let attrs: Vec<String> = d.attributes.iter().map(|a| clean(&a.to_string())).collect();
        writeln!(w, "{}\t{}\t{}\t{}", clean(&d.item_id), clean(&d.title), attrs.join("|"), clean(&d.text)).at(&p)?;
    }
    w.flush().at(&p)?;
    #[derive(Serialize)]
    struct StatsFile<'a> {
        stats: &'a DatasetStats,
        excluded_users: usize,
    }
    let p = dir.join(STATS_FILE);
    let body = serde_json::to_string_pretty(&StatsFile { stats: &split.stats, excluded_users: split.excluded_users })?;
    std::fs::write(&p, body).at(&p)?;
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<SplitDataset> {
    let p = dir.join(ITEMS_FILE);
    let text = std::fs::read_to_string(&p).at(&p)?;
    let bad = |p: &Path, line: usize, detail: &str| Error::Parse { path: p.to_path_buf(), line, detail: detail.into() };
    let mut catalog = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.splitn(4, '\t').collect();
        if f.len() != 4 {
            return Err(bad(&p, i + 1, "expected 4 columns"));
        }
        let attributes = f[2]
            .split('|')
            .filter(|s| !s.is_empty())
            .map(|s| {
                let (kind, value) = s.split_once(':').unwrap_or(("tag", s));
                Attribute { kind: kind.into(), value: value.into() }
            })
            .collect();
        catalog.push(ItemDescription { item_id: f[0].into(), title: f[1].into(), text: f[3].into(), attributes });
    }
    let p = dir.join(SPLIT_FILE);
    let text = std::fs::read_to_string(&p).at(&p)?;
    let index: HashMap<&str, usize> = catalog.iter().enumerate().map(|(k, d)| (d.item_id.as_str(), k)).collect();
    let mut user_ids: Vec<String> = Vec::new();
    let mut train: Vec<UserSequence> = Vec::new();
    let mut test: Vec<TestEvent> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(&p, i + 1, "expected 5 columns"));
        }
        let item = *index.get(f[1]).ok_or_else(|| bad(&p, i + 1, "unknown item"))?;
        let ts: i64 = f[2].parse().map_err(|_| bad(&p, i + 1, "bad timestamp"))?;
        let order: usize = f[4].parse().map_err(|_| bad(&p, i + 1, "bad order"))?;
        if user_ids.last().map(String::as_str) != Some(f[0]) {
            let user = user_ids.len();
            user_ids.push(f[0].to_string());
            train.push(UserSequence { user, items: vec![], timestamps: vec![], order: vec![] });
        }
        let user = user_ids.len() - 1;
        match f[3] {
            "train" => {
                let s = &mut train[user];
                s.items.push(item);
                s.timestamps.push(ts);
                s.order.push(order);
            }
            "test" => test.push(TestEvent { user, item, timestamp: ts, order }),
            _ => return Err(bad(&p, i + 1, "part must be train or test")),
        }
    }
    if test.len() != user_ids.len() {
        return Err(Error::Parse { path: p, line: 0, detail: "every user needs exactly one test event".into() });
    }
    #[derive(Deserialize)]
    struct StatsFile {
        stats: DatasetStats,
        excluded_users: usize,
    }
    let p = dir.join(STATS_FILE);
    let s: StatsFile = serde_json::from_str(&std::fs::read_to_string(&p).at(&p)?)?;
    Ok(SplitDataset { user_ids, catalog, train, test, stats: s.stats, excluded_users: s.excluded_users })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ix(u: &str, i: &str, r: f64, t: i64) -> Interaction {
        Interaction { user_id: u.into(), item_id: i.into(), rating: r, timestamp: t }
    }

    #[test]
    fn movielens_line() {
        assert_eq!(parse_movielens_rating("1::1193::5::978300760"), Some(ix("1", "1193", 5.0, 978300760)));
        assert_eq!(parse_movielens_rating("1::1193::5"), None);
        assert_eq!(parse_movielens_rating("1::1193::9::1"), None);
    }

    #[test]
    fn movie_line_tags_genres() {
        let d = parse_movielens_movie("2::Jumanji (1995)::Adventure|Children's|Fantasy").unwrap();
        assert_eq!(d.attributes.len(), 3);
        assert_eq!(d.attributes[1].to_string(), "genre:Children's");
        assert!(d.text.contains("Jumanji"));
    }

    #[test]
    fn amazon_millisecond_timestamps() {
        let x = parse_amazon_review(r#"{"user_id":"A1","parent_asin":"B2","rating":4.0,"timestamp":1588687728923}"#)
            .unwrap();
        assert_eq!(x.timestamp, 1588687728);
        let x = parse_amazon_review(r#"{"reviewerID":"A1","asin":"B2","overall":5.0,"unixReviewTime":1252800000}"#)
            .unwrap();
        assert_eq!(x.timestamp, 1252800000);
    }

    #[test]
    fn rating_threshold_is_strict() {
        let xs = vec![ix("1", "a", 4.0, 1), ix("1", "b", 3.0, 2)];
        let cfg = FilterConfig { min_user_inter: 0, min_item_inter: 0, ..Default::default() };
        let out = filter(&xs, &cfg);
        assert_eq!(out, vec![ix("1", "a", 4.0, 1)]);
    }

    #[test]
    fn user_below_threshold_dropped() {
        let mut xs = Vec::new();
        for k in 0..29 {
            xs.push(ix("light", &k.to_string(), 5.0, k));
        }
        for k in 0..30 {
            xs.push(ix("heavy", &k.to_string(), 5.0, k));
        }
        let cfg = FilterConfig { min_item_inter: 1, ..Default::default() };
        let out = filter(&xs, &cfg);
        assert!(out.iter().all(|x| x.user_id == "heavy"));
        assert_eq!(out.len(), 30);
    }

    #[test]
    fn split_tie_goes_to_later_record() {
        let xs = vec![ix("1", "a", 5.0, 5), ix("1", "b", 5.0, 5), ix("1", "c", 5.0, 1)];
        let s = leave_one_out_split(&xs, &[]);
        assert_eq!(s.catalog[s.test[0].item].item_id, "b");
        assert_eq!(s.train[0].items.iter().map(|&i| s.catalog[i].item_id.as_str()).collect::<Vec<_>>(), ["c", "a"]);
    }

    #[test]
    fn single_event_users_excluded() {
        let xs = vec![ix("1", "a", 5.0, 1), ix("2", "a", 5.0, 1), ix("2", "b", 5.0, 2)];
        let s = leave_one_out_split(&xs, &[]);
        assert_eq!(s.excluded_users, 1);
        assert_eq!(s.user_ids, vec!["2".to_string()]);
    }

    #[test]
    fn negatives_forced_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hist: HashSet<usize> = [0, 1].into_iter().collect();
        assert_eq!(sample_negatives(&hist, 3, 1, &mut rng).unwrap(), vec![2]);
        assert!(sample_negatives(&hist, 3, 0, &mut rng).unwrap().is_empty());
        assert!(matches!(sample_negatives(&hist, 3, 2, &mut rng), Err(Error::InfeasibleSample { .. })));
    }

    #[test]
    fn numeric_ids_sort_numerically() {
        let mut v = vec!["10", "9", "b", "100", "a"];
        v.sort_by(|a, b| id_cmp(a, b));
        assert_eq!(v, ["9", "10", "100", "a", "b"]);
    }
}
