//! Prompt construction, response parsing and reranking backends.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{mallows_sample, MallowsModel, Permutation};
use crate::error::{Error, Result};

/// Slot letters; a request can hold at most this many candidates.
pub const LETTERS: &[u8; 26] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Most recent interactions kept in a rendered history.
pub const MAX_HISTORY: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub title: String,
    pub year: Option<i32>,
    pub genres: Vec<String>,
    pub rating: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    /// Item index; not shown to the ranker.
    pub item: usize,
    pub title: String,
    pub year: Option<i32>,
    pub genres: Vec<String>,
}

/// Reference example from a similar user: their earlier history and their
/// final rated items, best rated first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub history: Vec<HistoryEntry>,
    pub rated: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRequest {
    pub user: usize,
    /// Oldest first.
    pub history: Vec<HistoryEntry>,
    /// Retrieval order; slot `i` gets letter `LETTERS[i]`.
    pub candidates: Vec<CandidateEntry>,
    pub fewshot: Option<FewShotExample>,
    /// Ask for `<think>` and `<reasoning>` sections before the output.
    pub reasoning: bool,
}

impl RerankRequest {
    pub fn mode(&self) -> PromptMode {
        if self.fewshot.is_some() {
            PromptMode::FewShot
        } else {
            PromptMode::ZeroShot
        }
    }

    pub fn k(&self) -> usize {
        self.candidates.len()
    }
}

fn letter(slot: usize) -> char {
    LETTERS[slot] as char
}

fn year_text(year: Option<i32>) -> String {
    year.map_or_else(|| "unknown".to_string(), |y| y.to_string())
}

/// `1. Heat (1995) [Action|Crime] - Rating: 4.5`
pub fn format_history_line(position: usize, entry: &HistoryEntry) -> String {
    format!(
        "{position}. {} ({}) [{}] - Rating: {:.1}",
        entry.title,
        year_text(entry.year),
        entry.genres.join("|"),
        entry.rating
    )
}

/// `A. Heat (1995) [Action|Crime]`
pub fn format_candidate_line(slot: usize, entry: &CandidateEntry) -> String {
    format!(
        "{}. {} ({}) [{}]",
        letter(slot),
        entry.title,
        year_text(entry.year),
        entry.genres.join("|")
    )
}

fn push_history(out: &mut String, entries: &[HistoryEntry]) {
    let start = entries.len().saturating_sub(MAX_HISTORY);
    for (i, e) in entries[start..].iter().enumerate() {
        out.push_str(&format_history_line(i + 1, e));
        out.push('\n');
    }
}

pub fn build_prompt(req: &RerankRequest) -> Result<String> {
    let k = req.k();
    if req.history.is_empty() {
        return Err(Error::InvalidRequest("user history is empty".into()));
    }
    if k < 2 || k > LETTERS.len() {
        return Err(Error::InvalidRequest(format!(
            "need between 2 and {} candidates, got {k}",
            LETTERS.len()
        )));
    }
    let example = (0..k).map(letter).map(String::from).collect::<Vec<_>>().join("-");
    let mut p = String::new();
    p.push_str(
        "You are a movie recommendation system. Using the user's viewing history, \
         listed in chronological order, pick items from the candidate pool by their \
         index letters.\n\n",
    );

    p.push_str("USER HISTORY:\n");
    push_history(&mut p, &req.history);
    p.push_str(
        "Entries run from the oldest movie the user watched to the most recent one. \
         Each entry has the form: [Position]. [Movie Title] ([Release Year]) [Genres] \
         - Rating: [User Rating]\n\
         Ratings go from 1.0 to 5.0; 5.0 means the user enjoyed the movie the most.\n\n",
    );

    let _ = writeln!(p, "TOP {k} CANDIDATE MOVIE LIST:");
    for (slot, c) in req.candidates.iter().enumerate() {
        p.push_str(&format_candidate_line(slot, c));
        p.push('\n');
    }
    p.push_str(
        "Every candidate has an index letter (A, B, ...) followed by its title, \
         release year and genres.\n\n",
    );

    if let Some(fs) = &req.fewshot {
        p.push_str("REFERENCE EXAMPLE: A similar user had the following history:\n");
        push_history(&mut p, &fs.history);
        p.push_str("This user rated the candidate product as:\n");
        push_history(&mut p, &fs.rated);
        p.push('\n');
    }

    p.push_str(
        "Reorder the candidates by this user's preferences: the first movie should be \
         the one the user is most likely to enjoy, and each later movie a little less \
         preferred",
    );
    if req.fewshot.is_some() {
        p.push_str(", taking the reference example into account as well");
    }
    p.push_str(". ");
    if req.reasoning {
        p.push_str(
            "Start your response with a paragraph summarizing the user's preferences \
             inside <think></think> tags. Next, justify the order of the candidates \
             inside <reasoning></reasoning> tags. ",
        );
    }
    let _ = write!(
        p,
        "Finally, give your ordering of ALL candidate movies as a hyphen-separated list \
         of indices (e.g., {example}) inside <output></output> tags.\n\n\
         Make sure to include ALL {k} movie indices in your response. The first index is \
         the movie you expect the user to enjoy most; the rest follow in decreasing order \
         of preference.\n"
    );
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no <output>...</output> section in response")]
    MissingOutputTag,
    #[error("invalid slot token {0:?}")]
    InvalidToken(String),
    #[error("duplicate letter {0}")]
    DuplicateLetter(char),
    #[error("expected {expected} letters, found {found}")]
    WrongLength { expected: usize, found: usize },
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::MissingOutputTag => "missing_output_tag",
            ParseError::InvalidToken(_) => "invalid_token",
            ParseError::DuplicateLetter(_) => "duplicate_letter",
            ParseError::WrongLength { .. } => "wrong_length",
        }
    }
}

/// Extracts the first `<output>` span and reads it as a best-first list of
/// slot letters.
pub fn parse_permutation(text: &str, k: usize) -> std::result::Result<Permutation, ParseError> {
    const OPEN: &str = "<output>";
    const CLOSE: &str = "</output>";
    let start = text.find(OPEN).ok_or(ParseError::MissingOutputTag)? + OPEN.len();
    let len = text[start..].find(CLOSE).ok_or(ParseError::MissingOutputTag)?;
    let body = &text[start..start + len];

    let mut letters = Vec::new();
    for token in body.split('-').map(str::trim) {
        match token.as_bytes() {
            [b] if b.is_ascii_uppercase() => letters.push((b - b'A') as usize),
            _ => return Err(ParseError::InvalidToken(token.to_string())),
        }
    }
    if letters.len() != k {
        return Err(ParseError::WrongLength {
            expected: k,
            found: letters.len(),
        });
    }
    let mut seen = [false; 26];
    for &slot in &letters {
        if slot >= k {
            return Err(ParseError::InvalidToken(letter(slot).to_string()));
        }
        if std::mem::replace(&mut seen[slot], true) {
            return Err(ParseError::DuplicateLetter(letter(slot)));
        }
    }
    Ok(Permutation::from_order(&letters).expect("distinct in-range slots"))
}

/// The canonical `<output>B-A-C</output>` rendering of a permutation.
pub fn render_output(perm: &Permutation) -> String {
    let letters: Vec<String> = perm.order().into_iter().map(|s| letter(s).to_string()).collect();
    format!("<output>{}</output>", letters.join("-"))
}

#[derive(Debug, thiserror::Error)]
pub enum RerankError {
    #[error("request failed: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response has no text at {0}")]
    MissingText(String),
    #[error("no valid ordering after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: ParseError },
}

/// Settings for an OpenAI-style chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    /// JSON pointer to the reply text.
    #[serde(default = "default_response_path")]
    pub response_path: String,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> usize {
    2
}
fn default_response_path() -> String {
    "/choices/0/message/content".into()
}

/// Environment variable holding the bearer token for the remote backend.
pub const API_KEY_ENV: &str = "VGCL_API_KEY";

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: default_temperature(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            response_path: default_response_path(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        if config.endpoint.trim().is_empty() || config.model.trim().is_empty() {
            return Err(Error::InvalidParameter(
                "remote backend needs an endpoint and a model name".into(),
            ));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            config,
            agent,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn complete(&self, prompt: &str) -> std::result::Result<String, RerankError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(transport_error)?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(transport_error)?;
        if !(200..300).contains(&status) {
            return Err(RerankError::Status { status, body: text });
        }
        let json: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| RerankError::Transport(format!("response is not JSON: {e}")))?;
        json.pointer(&self.config.response_path)
            .and_then(|v| v.as_str())
            .map(String::from)
            .ok_or_else(|| RerankError::MissingText(self.config.response_path.clone()))
    }
}

fn transport_error(e: ureq::Error) -> RerankError {
    match e {
        ureq::Error::Timeout(_) => RerankError::Timeout,
        other => RerankError::Transport(other.to_string()),
    }
}

/// Order a simulated ranker is centered on.
#[derive(Debug, Clone, PartialEq)]
pub enum IdealOrder {
    /// The retrieval order itself.
    Retrieval,
    /// Per user, an item moved to the front when it is among the
    /// candidates; the rest keep retrieval order.
    Preferred(HashMap<usize, usize>),
}

/// Local stand-in for a stochastic ranker: Mallows draws around an ideal
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulator {
    pub theta: f64,
    pub ideal: IdealOrder,
}

impl Simulator {
    /// Best-first slot order for `req`.
    pub fn center(&self, req: &RerankRequest) -> Vec<usize> {
        let mut order: Vec<usize> = (0..req.k()).collect();
        if let IdealOrder::Preferred(map) = &self.ideal {
            if let Some(&item) = map.get(&req.user) {
                if let Some(pos) = req.candidates.iter().position(|c| c.item == item) {
                    order.remove(pos);
                    order.insert(0, pos);
                }
            }
        }
        order
    }
}

#[derive(Debug, Clone)]
pub enum RerankBackend {
    Remote(RemoteBackend),
    Simulator(Simulator),
}

/// One reranking of `req`'s candidates.
pub fn rerank_once<R: Rng + ?Sized>(
    backend: &RerankBackend,
    req: &RerankRequest,
    rng: &mut R,
) -> Result<Permutation> {
    match backend {
        RerankBackend::Simulator(sim) => {
            if req.k() == 0 {
                return Err(Error::InvalidRequest("no candidates".into()));
            }
            let center = Permutation::from_order(&sim.center(req))?;
            let model = MallowsModel::new(center, sim.theta)?;
            Ok(mallows_sample(&model, rng))
        }
        RerankBackend::Remote(remote) => {
            let prompt = build_prompt(req)?;
            let attempts = remote.config.max_retries + 1;
            let mut last = ParseError::MissingOutputTag;
            for attempt in 1..=attempts {
                let text = remote.complete(&prompt)?;
                match parse_permutation(&text, req.k()) {
                    Ok(p) => return Ok(p),
                    Err(e) => {
                        log::debug!("user {}: attempt {attempt} unparsable: {e}", req.user);
                        last = e;
                    }
                }
            }
            Err(RerankError::Exhausted { attempts, last }.into())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    pub(crate) fn entry(title: &str, year: i32, genres: &[&str], rating: f32) -> HistoryEntry {
        HistoryEntry {
            title: title.into(),
            year: Some(year),
            genres: genres.iter().map(|g| g.to_string()).collect(),
            rating,
        }
    }

    fn request(k: usize, fewshot: bool) -> RerankRequest {
        RerankRequest {
            user: 0,
            history: vec![
                entry("Heat", 1995, &["Action", "Crime"], 4.5),
                entry("Fargo", 1996, &["Crime", "Drama", "Thriller"], 5.0),
            ],
            candidates: (0..k)
                .map(|i| CandidateEntry {
                    item: 100 + i,
                    title: format!("Film {i}"),
                    year: if i == 1 { None } else { Some(1990 + i as i32) },
                    genres: vec!["Drama".into()],
                })
                .collect(),
            fewshot: fewshot.then(|| FewShotExample {
                history: vec![entry("Alien", 1979, &["Horror", "Sci-Fi"], 4.0)],
                rated: vec![entry("Film 3", 1993, &["Drama"], 5.0)],
            }),
            reasoning: true,
        }
    }

    #[test]
    fn history_line_format() {
        let line = format_history_line(1, &entry("Heat", 1995, &["Action", "Crime"], 4.5));
        assert_eq!(line, "1. Heat (1995) [Action|Crime] - Rating: 4.5");
        let whole = format_history_line(2, &entry("Fargo", 1996, &["Crime"], 5.0));
        assert_eq!(whole, "2. Fargo (1996) [Crime] - Rating: 5.0");
    }

    #[test]
    fn few_shot_prompt_lists_each_letter_once() {
        let p = build_prompt(&request(10, true)).unwrap();
        let section = p
            .split("CANDIDATE MOVIE LIST:\n")
            .nth(1)
            .unwrap()
            .split("\n\n")
            .next()
            .unwrap();
        for (slot, l) in "ABCDEFGHIJ".chars().enumerate() {
            let prefix = format!("{l}. ");
            let hits = section.lines().filter(|line| line.starts_with(&prefix)).count();
            assert_eq!(hits, 1, "letter {l}");
            assert!(section.contains(&format!("{l}. Film {slot} (")));
        }
        assert!(!section.lines().any(|l| l.starts_with("K. ")));
        assert!(p.contains("<output>"));
        assert!(p.contains("REFERENCE EXAMPLE"));
        assert!(p.contains("TOP 10 CANDIDATE MOVIE LIST:"));
        assert!(p.contains("ALL 10 movie indices"));
        assert!(p.contains("1. Heat (1995) [Action|Crime] - Rating: 4.5"));
        assert!(p.contains("B. Film 1 (unknown) [Drama]"));
        assert!(p.contains("<think>") && p.contains("<reasoning>"));
    }

    #[test]
    fn zero_shot_prompt_has_no_reference_block() {
        let p = build_prompt(&request(4, false)).unwrap();
        assert!(!p.contains("REFERENCE EXAMPLE"));
        assert!(p.contains("A-B-C-D"));
    }

    #[test]
    fn no_reasoning_prompt_omits_sections() {
        let mut req = request(3, true);
        req.reasoning = false;
        let p = build_prompt(&req).unwrap();
        assert!(!p.contains("<think>") && !p.contains("<reasoning>"));
        assert!(p.contains("<output></output>"));
    }

    #[test]
    fn prompt_is_deterministic() {
        let req = request(6, true);
        assert_eq!(build_prompt(&req).unwrap(), build_prompt(&req.clone()).unwrap());
    }

    #[test]
    fn history_is_capped_to_recent_entries() {
        let mut req = request(3, false);
        req.history = (0..MAX_HISTORY + 5)
            .map(|i| entry(&format!("M{i}"), 2000, &["Drama"], 3.0))
            .collect();
        let p = build_prompt(&req).unwrap();
        assert!(!p.contains(" M4 ("));
        assert!(p.contains("1. M5 ("));
        assert!(p.contains(&format!("{MAX_HISTORY}. M{} (", MAX_HISTORY + 4)));
    }

    #[test]
    fn prompt_errors() {
        let mut req = request(3, false);
        req.history.clear();
        assert!(build_prompt(&req).is_err());
        assert!(build_prompt(&request(27, false)).is_err());
        assert!(build_prompt(&request(1, false)).is_err());
    }

    #[test]
    fn parse_examples() {
        let p = parse_permutation("<think>x</think><output>B-A-C</output>", 3).unwrap();
        assert_eq!(p.ranks(), &[1, 0, 2]);
        let spaced = parse_permutation("<output> C - A -B </output>", 3).unwrap();
        assert_eq!(spaced.order(), vec![2, 0, 1]);
        let first = parse_permutation("<output>A-B</output><output>B-A</output>", 2).unwrap();
        assert_eq!(first.order(), vec![0, 1]);
    }

    #[test]
    fn parse_error_codes() {
        let code = |t: &str, k| parse_permutation(t, k).unwrap_err().code();
        assert_eq!(code("<output>A-A-B</output>", 3), "duplicate_letter");
        assert_eq!(code("<output>A-B</output>", 3), "wrong_length");
        assert_eq!(code("<output>A-B-C-D</output>", 3), "wrong_length");
        assert_eq!(code("A-B-C", 3), "missing_output_tag");
        assert_eq!(code("<output>A-B-C", 3), "missing_output_tag");
        assert_eq!(code("<output>A-B-D</output>", 3), "invalid_token");
        assert_eq!(code("<output>A-b-C</output>", 3), "invalid_token");
        assert_eq!(code("<output>A--B</output>", 3), "invalid_token");
        assert_eq!(code("<output>AB-C</output>", 3), "invalid_token");
    }

    proptest! {
        #[test]
        fn parser_is_total(text in ".{0,200}", k in 0usize..30) {
            let _ = parse_permutation(&text, k);
        }

        #[test]
        fn parser_is_total_near_valid(body in "[A-Ca-c \\-]{0,12}", k in 0usize..5) {
            let _ = parse_permutation(&format!("<output>{body}</output>"), k);
        }

        #[test]
        fn render_round_trips(order in (1usize..=26).prop_flat_map(|k| Just((0..k).collect::<Vec<_>>()).prop_shuffle())) {
            let p = Permutation::from_order(&order).unwrap();
            prop_assert_eq!(parse_permutation(&render_output(&p), p.len()).unwrap(), p);
        }
    }

    #[test]
    fn sharp_simulator_returns_ideal_order() {
        let req = request(5, false);
        let mut rng = StdRng::seed_from_u64(0);
        let retrieval = RerankBackend::Simulator(Simulator { theta: 1e3, ideal: IdealOrder::Retrieval });
        for _ in 0..20 {
            assert_eq!(rerank_once(&retrieval, &req, &mut rng).unwrap().order(), vec![0, 1, 2, 3, 4]);
        }
        let preferred = RerankBackend::Simulator(Simulator {
            theta: 1e3,
            ideal: IdealOrder::Preferred(HashMap::from([(0, 103)])),
        });
        assert_eq!(rerank_once(&preferred, &req, &mut rng).unwrap().order(), vec![3, 0, 1, 2, 4]);
    }

    #[test]
    fn remote_config_validation() {
        assert!(RemoteBackend::new(RemoteConfig::new("", "m")).is_err());
        assert!(RemoteBackend::new(RemoteConfig::new("http://x", " ")).is_err());
        let cfg: RemoteConfig =
            serde_json::from_str(r#"{"endpoint": "http://x", "model": "m"}"#).unwrap();
        assert_eq!(cfg.temperature, 1.0);
        assert_eq!(cfg.response_path, "/choices/0/message/content");
        assert!(serde_json::from_str::<RemoteConfig>(r#"{"endpoint": "e", "model": "m", "x": 1}"#).is_err());
    }
}
