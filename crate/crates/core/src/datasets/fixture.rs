//! Deterministic synthetic ratings with planted genre clusters.
//!
//! Item `j` (0-based) has primary genre `j % genres`; every third item also
//! carries a secondary genre. User `u` (0-based) prefers genre `u % genres`:
//! most of their ratings fall on that genre, some on a fixed second genre and
//! the rest anywhere. Popularity inside a genre is Zipf-shaped.

use std::fmt::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const GENRES: [&str; 10] =
    ["Action", "Comedy", "Drama", "Horror", "Mystery", "Sci-Fi", "Thriller", "War", "Western", "Animation"];

const ADJECTIVES: [&str; 20] = [
    "Silent", "Crimson", "Hidden", "Broken", "Golden", "Distant", "Frozen", "Wild", "Last", "Electric", "Hollow",
    "Burning", "Secret", "Endless", "Copper", "Iron", "Velvet", "Midnight", "Lucky", "Bitter",
];
const NOUNS: [&str; 15] = [
    "River", "Harbor", "Engine", "Garden", "Canyon", "Empire", "Mirror", "Voyage", "Signal", "Orchard", "Citadel",
    "Frontier", "Lantern", "Meadow", "Storm",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub users: usize,
    pub items: usize,
    pub genres: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub dominant_share: f64,
    pub secondary_share: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 300,
            genres: 10,
            min_events: 20,
            max_events: 35,
            dominant_share: 0.7,
            secondary_share: 0.15,
            zipf_exponent: 0.8,
            seed: 20240601,
        }
    }
}

pub fn item_genres(j: usize, genres: usize) -> Vec<usize> {
    let primary = j % genres;
    let mut g = vec![primary];
    if j % 3 == 0 {
        let secondary = (j / genres + primary + 3) % genres;
        if secondary != primary {
            g.push(secondary);
        }
    }
    g
}

pub fn user_dominant(u: usize, genres: usize) -> usize {
    u % genres
}

pub fn user_secondary(u: usize, genres: usize) -> usize {
    (u % genres + 1 + (u / genres) % (genres - 1)) % genres
}

fn title(j: usize) -> String {
    let a = ADJECTIVES[j % ADJECTIVES.len()];
    let n = NOUNS[(j / ADJECTIVES.len()) % NOUNS.len()];
    let cycle = j / (ADJECTIVES.len() * NOUNS.len());
    let year = 1960 + (j * 7) % 40;
    if cycle == 0 {
        format!("The {a} {n} ({year})")
    } else {
        format!("The {a} {n} {} ({year})", cycle + 1)
    }
}

/// `movies.dat` in movielens format.
pub fn movies_dat(cfg: &FixtureConfig) -> String {
    let mut s = String::new();
    for j in 0..cfg.items {
        let names: Vec<&str> = item_genres(j, cfg.genres).into_iter().map(|g| GENRES[g % GENRES.len()]).collect();
        writeln!(s, "{}::{}::{}", j + 1, title(j), names.join("|")).unwrap();
    }
    s
}

/// `ratings.dat` in movielens format.
pub fn ratings_dat(cfg: &FixtureConfig) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut by_genre: Vec<Vec<usize>> = vec![vec![]; cfg.genres];
    for j in 0..cfg.items {
        by_genre[j % cfg.genres].push(j);
    }
    let zipf: Vec<Vec<f64>> = by_genre
        .iter()
        .map(|items| (0..items.len()).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent)).collect())
        .collect();
    let base: i64 = 978_300_000;
    let mut s = String::new();
    for u in 0..cfg.users {
        let dom = user_dominant(u, cfg.genres);
        let sec = user_secondary(u, cfg.genres);
        let n = rng.gen_range(cfg.min_events..=cfg.max_events);
        let mut seen = vec![false; cfg.items];
        let mut t = base + rng.gen_range(0..30 * 86_400);
        let mut emitted = 0;
        let mut attempts = 0;
        while emitted < n && attempts < 50 * n {
            attempts += 1;
            let roll: f64 = rng.gen();
            let (item, affinity) = if roll < cfg.dominant_share {
                let k = WeightedIndex::new(&zipf[dom]).unwrap().sample(&mut rng);
                (by_genre[dom][k], 2)
            } else if roll < cfg.dominant_share + cfg.secondary_share {
                let k = WeightedIndex::new(&zipf[sec]).unwrap().sample(&mut rng);
                (by_genre[sec][k], 1)
            } else {
                (rng.gen_range(0..cfg.items), 0)
            };
            if seen[item] {
                continue;
            }
            seen[item] = true;
            let rating = match affinity {
                2 if rng.gen_bool(0.9) => rng.gen_range(4..=5),
                1 if rng.gen_bool(0.75) => rng.gen_range(4..=5),
                0 if rng.gen_bool(0.5) => rng.gen_range(4..=5),
                _ => rng.gen_range(1..=3),
            };
            t += rng.gen_range(60..6 * 3600);
            writeln!(s, "{}::{}::{}::{}", u + 1, item + 1, rating, t).unwrap();
            emitted += 1;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn titles_are_unique() {
        let mut t: Vec<String> = (0..300).map(title).collect();
        t.sort();
        t.dedup();
        assert_eq!(t.len(), 300);
    }

    #[test]
    fn secondary_differs_from_dominant() {
        for u in 0..200 {
            assert_ne!(user_dominant(u, 10), user_secondary(u, 10));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = FixtureConfig { users: 5, ..Default::default() };
        assert_eq!(ratings_dat(&cfg), ratings_dat(&cfg));
    }
}
