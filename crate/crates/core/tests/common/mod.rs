#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use squadrank_core::fusion::HashedEmbedder;
use squadrank_core::{
    AgentRole, EmbeddingVector, GalleryIndex, GalleryItem, Qrels, QueryRecord, ScriptedBackend, ScriptedResponse, Tags,
};

pub struct Fixture {
    pub index: GalleryIndex,
    pub queries: Vec<QueryRecord>,
    pub qrels: Qrels,
    pub script: Vec<ScriptedResponse>,
}

impl Fixture {
    pub fn backend(&self) -> ScriptedBackend {
        ScriptedBackend::new(self.script.clone())
    }

    /// The Writer caption scripted for `image_ref`, looked up directly.
    pub fn writer_caption(&self, image_ref: &str) -> Option<&str> {
        self.script
            .iter()
            .find(|s| {
                s.role == AgentRole::Writer && s.image_ref == image_ref && s.query_id.is_none() && s.round.is_none()
            })
            .map(|s| s.response.as_str())
    }
}

pub fn embedder() -> HashedEmbedder {
    HashedEmbedder::new(1024, 0).unwrap()
}

pub fn say(role: AgentRole, image_ref: &str, response: &str) -> ScriptedResponse {
    ScriptedResponse {
        role,
        image_ref: image_ref.to_string(),
        response: response.to_string(),
        query_id: None,
        round: None,
    }
}

pub fn item(id: &str, embedding: Vec<f64>, tags: Tags) -> GalleryItem {
    GalleryItem {
        item_id: id.to_string(),
        embedding: EmbeddingVector::new(embedding).unwrap(),
        image_ref: format!("images/{id}.jpg"),
        tags,
    }
}

pub fn query(id: &str, text: &str, embedding: Vec<f64>, tags: Tags) -> QueryRecord {
    QueryRecord {
        query_id: id.to_string(),
        text: text.to_string(),
        embedding: EmbeddingVector::new(embedding).unwrap(),
        tags,
    }
}

pub const PERFECT_QUERY: &str = "a man collapses onto the wet pavement";

/// Five candidates at cosines 1.0, 0.9, 0.8, 0.7, 0.6 to the query; the
/// ground truth `g3` sits at coarse rank 3. The Detective accepts everyone,
/// the Writer echoes the query for `g3` and writes token-disjoint captions
/// for the others.
pub fn perfect_agent_fixture() -> Fixture {
    let cosines = [1.0f64, 0.9, 0.8, 0.7, 0.6];
    let others = [
        "someone doing push ups indoors",
        "cyclist riding past shops",
        "",
        "two people chatting outdoors",
        "dog walker crossing street",
    ];
    let mut items = Vec::new();
    let mut script = Vec::new();
    for (i, c) in cosines.iter().enumerate() {
        let id = format!("g{}", i + 1);
        let it = item(&id, vec![*c, (1.0 - c * c).max(0.0).sqrt()], Tags::new());
        script.push(say(AgentRole::Detective, &it.image_ref, "Yes"));
        script.push(say(
            AgentRole::Analyst,
            &it.image_ref,
            "gender: male\naction: lying down",
        ));
        let caption = if id == "g3" { PERFECT_QUERY } else { others[i] };
        script.push(say(AgentRole::Writer, &it.image_ref, caption));
        items.push(it);
    }
    Fixture {
        index: GalleryIndex::build(items).unwrap(),
        queries: vec![query("q0", PERFECT_QUERY, vec![1.0, 0.0], Tags::new())],
        qrels: Qrels::from([("q0".to_string(), BTreeSet::from(["g3".to_string()]))]),
        script,
    }
}

const WORDS: [&str; 24] = [
    "man", "woman", "falls", "runs", "jacket", "red", "blue", "street", "rain", "snow", "bag", "bicycle", "kneels",
    "fights", "crowd", "night", "lying", "ground", "climbs", "fence", "pushes", "cart", "smoke", "stairs",
];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(3..7);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Random gallery/queries/qrels with a scripted squad. When `perfect` the
/// Detective accepts every candidate; otherwise verdicts are a mix of yes,
/// no, unparseable and missing entries.
pub fn random_fixture(seed: u64, perfect: bool) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 4;
    let n_items = rng.random_range(5..=20);
    let conditions = ["rain", "snow", "fog"];
    let mut items = Vec::new();
    let mut script = Vec::new();
    for i in 0..n_items {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tags = Tags::new();
        if rng.random_bool(0.7) {
            tags.insert(
                "gender".into(),
                ["male", "female"].choose(&mut rng).unwrap().to_string(),
            );
            tags.insert("action".into(), WORDS.choose(&mut rng).unwrap().to_string());
        }
        let it = item(&format!("g{i:02}"), v, tags);
        let verdict = if perfect {
            "Yes"
        } else {
            *["Yes", "yes, same person", "No", "no.", "unclear"]
                .choose(&mut rng)
                .unwrap()
        };
        script.push(say(AgentRole::Detective, &it.image_ref, verdict));
        if perfect || rng.random_bool(0.9) {
            script.push(say(AgentRole::Analyst, &it.image_ref, "gender: male\nscene: street"));
        }
        script.push(say(AgentRole::Writer, &it.image_ref, &sentence(&mut rng)));
        items.push(it);
    }
    let n_queries = rng.random_range(2..=4);
    let mut queries = Vec::new();
    let mut qrels = Qrels::new();
    for q in 0..n_queries {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tags = Tags::from([("condition".to_string(), conditions[q % 3].to_string())]);
        let id = format!("q{q}");
        queries.push(query(&id, &sentence(&mut rng), v, tags));
        let n_rel = rng.random_range(1..=3);
        let rel: BTreeSet<String> = (0..n_rel)
            .map(|_| format!("g{:02}", rng.random_range(0..n_items)))
            .collect();
        qrels.insert(id, rel);
    }
    Fixture {
        index: GalleryIndex::build(items).unwrap(),
        queries,
        qrels,
        script,
    }
}
