//! Corpora for the integration tests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Zipf};
use rand_xoshiro::Xoshiro256StarStar;

const COMMON: &[&str] = &[
    "the", "of", "and", "in", "a", "to", "is", "was", "for", "as", "by", "with", "on", "that", "from", "his", "at",
    "which", "an", "are", "it", "be", "or", "were", "its", "this", "first", "also", "has", "had", "he", "not", "but",
    "their", "after", "other", "one", "two", "new", "they", "been", "who", "city", "called", "when", "most", "into",
    "during", "used", "known", "where", "more", "later", "state", "such", "world", "between", "may", "people", "time",
];

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "ch", "th", "br", "pl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ou", "ea", "ai"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "t", "nd", "ng", "st"];

/// Wikipedia-dump-like XML: pages of prose with links, bold titles, headings
/// and categories, words drawn from a fixed Zipfian lexicon.
pub struct WikiText {
    lexicon: Vec<String>,
    zipf: Zipf<f64>,
    rng: Xoshiro256StarStar,
    page: u64,
}

impl WikiText {
    pub fn new(seed: u64) -> Self {
        let mut lex_rng = Xoshiro256StarStar::seed_from_u64(0x5eed);
        let mut lexicon: Vec<String> = COMMON.iter().map(|w| w.to_string()).collect();
        while lexicon.len() < 4000 {
            let syllables = lex_rng.random_range(1..=4);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[lex_rng.random_range(0..ONSETS.len())]);
                w.push_str(VOWELS[lex_rng.random_range(0..VOWELS.len())]);
                w.push_str(CODAS[lex_rng.random_range(0..CODAS.len())]);
            }
            if !lexicon.contains(&w) {
                lexicon.push(w);
            }
        }
        let zipf = Zipf::new(lexicon.len() as f64, 1.1).expect("valid Zipf parameters");
        WikiText { lexicon, zipf, rng: Xoshiro256StarStar::seed_from_u64(seed), page: 0 }
    }

    fn word(&mut self) -> &str {
        let i = self.zipf.sample(&mut self.rng) as usize - 1;
        &self.lexicon[i]
    }

    fn rare_word(&mut self) -> String {
        let i = self.rng.random_range(COMMON.len()..self.lexicon.len());
        self.lexicon[i].clone()
    }

    fn capitalized(w: &str) -> String {
        let mut c = w.chars();
        c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
    }

    fn title(&mut self) -> String {
        let n = self.rng.random_range(1..=3);
        (0..n).map(|_| Self::capitalized(&self.rare_word())).collect::<Vec<_>>().join(" ")
    }

    fn sentence(&mut self, out: &mut String) {
        let n = self.rng.random_range(6..=24);
        for i in 0..n {
            if i > 0 {
                out.push(' ');
            }
            let roll: f64 = self.rng.random();
            if roll < 0.06 {
                let t = self.title();
                write!(out, "[[{t}]]").unwrap();
            } else if roll < 0.09 {
                let y = self.rng.random_range(1750..2009);
                write!(out, "{y}").unwrap();
            } else {
                let w = self.word().to_string();
                out.push_str(&if i == 0 { Self::capitalized(&w) } else { w });
            }
            if i + 1 < n && self.rng.random_bool(0.07) {
                out.push(',');
            }
        }
        out.push('.');
    }

    fn page(&mut self) -> String {
        self.page += 1;
        let title = self.title();
        let mut body = format!("'''{title}''' is ");
        for s in 0..self.rng.random_range(3..=9) {
            if s > 0 {
                body.push_str(if self.rng.random_bool(0.3) { "\n\n" } else { " " });
            }
            if s > 0 && self.rng.random_bool(0.15) {
                let h = Self::capitalized(&self.rare_word());
                writeln!(body, "== {h} ==").unwrap();
            }
            self.sentence(&mut body);
        }
        let cat = self.title();
        write!(body, "\n\n== References ==\n{{{{reflist}}}}\n\n[[Category:{cat}]]").unwrap();
        let (day, hour, minute) = (self.rng.random_range(1..29), self.rng.random_range(0..24), self.rng.random_range(0..60));
        let user = Self::capitalized(&self.rare_word());
        let uid = self.rng.random_range(1..900_000);
        format!(
            "  <page>\n    <title>{title}</title>\n    <id>{id}</id>\n    <revision>\n      <id>{rev}</id>\n      \
             <timestamp>2006-03-{day:02}T{hour:02}:{minute:02}:00Z</timestamp>\n      <contributor>\n        \
             <username>{user}</username>\n        <id>{uid}</id>\n      </contributor>\n      \
             <text xml:space=\"preserve\">{body}</text>\n    </revision>\n  </page>\n",
            id = self.page,
            rev = 4_000_000 + self.page * 17,
        )
    }

    /// Whole pages totalling at least `len` bytes, cut to exactly `len`.
    pub fn generate(&mut self, len: usize) -> Vec<u8> {
        let mut out = String::with_capacity(len + 4096);
        while out.len() < len {
            let p = self.page();
            out.push_str(&p);
        }
        let mut bytes = out.into_bytes();
        bytes.truncate(len);
        bytes
    }
}

/// Sorted `.ppm` files of one thumbnail split (`train` or `heldout`).
pub fn thumbnails(split: &str) -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/thumbnails").join(split);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    paths
}
