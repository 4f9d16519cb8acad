//! Synthetic corpora and configs shared by the CLI tests and the
//! acceptance suite.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const SPEAKERS: [&str; 3] = ["alice", "bob", "carol"];

const TOPICS: [&str; 10] = [
    "the weather", "dinner", "the movie", "work", "the game", "music", "the party", "school", "the car", "coffee",
];

const QUESTIONS: [&str; 4] = [
    "what do you think about {t} ?",
    "do you like {t} ?",
    "tell me about {t} .",
    "how was {t} ?",
];

/// Each speaker answers from its own word set; only the topic is shared.
const STYLES: [[&str; 3]; 3] = [
    ["oh wow , {t} is so lovely !", "i adore {t} , darling !", "oh wow , i adore it !"],
    ["meh . {t} is boring , dude .", "dude , {t} stinks .", "meh , whatever , dude ."],
    ["indeed , {t} is quite fascinating , sir .", "quite so , sir .", "{t} ? most curious indeed ."],
];

fn fill(template: &str, topic: &str) -> String {
    template.replace("{t}", topic)
}

/// The `i`-th synthetic exchange answered by speaker `s`.
pub fn exchange(s: usize, i: usize) -> (String, String) {
    let topic = TOPICS[(i * 3 + s) % TOPICS.len()];
    let q = QUESTIONS[(i / TOPICS.len() + i) % QUESTIONS.len()];
    let r = STYLES[s][(i * 7 / 3 + i / 5) % 3];
    (fill(q, topic), fill(r, topic))
}

/// Probe questions for comparing speakers.
pub fn probes() -> Vec<String> {
    TOPICS.iter().take(4).map(|t| fill(QUESTIONS[0], t)).collect()
}

#[derive(Clone, Debug)]
pub struct Sizes {
    pub pretrain_pairs: usize,
    pub pairs_per_speaker: usize,
}

/// Writes a movie-dialog pre-training corpus (speakers mixed, no persona
/// signal usable) and a two-file script fine-tuning corpus under `dir`.
pub fn write_corpora(dir: &Path, sizes: &Sizes) {
    let mut lines = String::new();
    let mut convs = String::new();
    for k in 0..sizes.pretrain_pairs {
        let s = k % SPEAKERS.len();
        let (q, r) = exchange(s, k / SPEAKERS.len() + 1000);
        let (a, b) = (2 * k + 1, 2 * k + 2);
        let movie = k % 4;
        writeln!(lines, "L{a} +++$+++ u{movie}0 +++$+++ m{movie} +++$+++ ASKER +++$+++ {q}").unwrap();
        writeln!(lines, "L{b} +++$+++ u{movie}1 +++$+++ m{movie} +++$+++ ANSWERER +++$+++ {r}").unwrap();
        writeln!(convs, "u{movie}0 +++$+++ u{movie}1 +++$+++ m{movie} +++$+++ ['L{a}', 'L{b}']").unwrap();
    }
    fs::write(dir.join("movie_lines.txt"), lines).unwrap();
    fs::write(dir.join("movie_conversations.txt"), convs).unwrap();

    let mut scripts = [String::new(), String::new()];
    for i in 0..sizes.pairs_per_speaker {
        for (s, name) in SPEAKERS.iter().enumerate() {
            let (q, r) = exchange(s, i);
            let out = &mut scripts[i % 2];
            writeln!(out, "(Scene: a room.)\nHOST: {q}\n{}: {r}\n", name.to_uppercase()).unwrap();
        }
    }
    fs::write(dir.join("script1.txt"), &scripts[0]).unwrap();
    fs::write(dir.join("script2.txt"), &scripts[1]).unwrap();
}

pub const BASE_CONFIG: &str = r#"
schema = 1
profile = "tiny"
seed = 7
output_dir = "out"

[data]
pretrain = { format = "cornell", lines = "movie_lines.txt", conversations = "movie_conversations.txt" }
finetune = { format = "script", files = ["script1.txt", "script2.txt"] }
speakers = ["alice", "bob", "carol"]
"#;

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Writes `BASE_CONFIG` with each of `layers` merged over it, in order,
/// as `name` in `dir`.
pub fn write_config(dir: &Path, name: &str, layers: &[&str]) -> PathBuf {
    let mut table: toml::Table = BASE_CONFIG.parse().unwrap();
    for layer in layers {
        merge(&mut table, layer.parse().unwrap());
    }
    let path = dir.join(name);
    fs::write(&path, toml::to_string(&table).unwrap()).unwrap();
    path
}

/// Every file under `dir`, relative path and contents, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}
