//! Deterministic in-process backend for tests and offline runs.
//!
//! The `echo` fixture answers every request from the manifest's ground
//! truth: VQA prompts return the item's true class name, captions are a
//! fixed keyword sentence per class, image embeddings are class-conditioned
//! Gaussians, text embeddings are seeded hashes of the text. Given a fixture
//! seed the whole pipeline is reproducible bit for bit.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dataset::{CesClass, DatasetManifest};

use super::{
    ChatOutcome, ChatRequest, EmbedInput, EmbedOutcome, EmbedRequest, ImagePayload, ItemResult,
    TokenUsage, Transport, TransportFault,
};

/// Keyword vocabulary for one class: drives mock captions and the mock
/// zero-shot labeler. Sets are pairwise disjoint and avoid the class-name
/// tokens themselves (the mapping prompt embeds the class list).
pub fn class_keywords(class: CesClass) -> &'static [&'static str] {
    match class {
        CesClass::CulturalReligious => &["church", "chapel", "heritage", "monument", "ceremony"],
        CesClass::FaunaFlora => &["animal", "bird", "flower", "plant", "wildlife"],
        CesClass::Gastronomy => &["food", "wine", "restaurant", "dish", "meal"],
        CesClass::LandscapeNature => &["mountain", "river", "valley", "forest", "panorama"],
        CesClass::Sports => &["climbing", "hiking", "bicycle", "race", "athlete"],
        CesClass::UrbanRural => &["village", "street", "buildings", "houses", "town"],
    }
}

fn class_caption(class: CesClass) -> String {
    let words = class_keywords(class);
    format!(
        "A photo of {} and {} with {}, {}, {}.",
        words[0], words[1], words[2], words[3], words[4]
    )
}

/// A scripted wire-level failure, consumed one per transport call.
#[derive(Debug, Clone)]
pub enum MockFault {
    RateLimited { retry_after_secs: u64 },
    Status { code: u16, body: String },
    Network(String),
}

impl MockFault {
    fn to_transport(&self) -> TransportFault {
        match self {
            MockFault::RateLimited { retry_after_secs } => TransportFault::Status {
                code: 429,
                body: "rate limited".to_string(),
                retry_after_secs: Some(*retry_after_secs),
            },
            MockFault::Status { code, body } => TransportFault::Status {
                code: *code,
                body: body.clone(),
                retry_after_secs: None,
            },
            MockFault::Network(reason) => TransportFault::Network(reason.clone()),
        }
    }
}

/// Ground-truth-echo backend over a manifest.
pub struct MockBackend {
    seed: u64,
    labels: BTreeMap<String, CesClass>,
    caption_fixtures: BTreeMap<String, String>,
    chat_fixtures: BTreeMap<String, String>,
    item_failures: BTreeMap<String, String>,
    faults: Mutex<VecDeque<MockFault>>,
    calls: AtomicU64,
    pub image_dims: usize,
    pub text_dims: usize,
    /// Spread of the class-conditioned Gaussian image embeddings.
    pub sigma: f64,
    usage_per_chat: (u64, u64),
    usage_per_embed: (u64, u64),
}

impl MockBackend {
    /// Build the echo fixture from a manifest's ground truth.
    pub fn echo(manifest: &DatasetManifest, seed: u64) -> Self {
        let labels = manifest
            .records
            .iter()
            .filter_map(|r| r.label.map(|l| (r.id.clone(), l)))
            .collect();
        Self {
            seed,
            labels,
            caption_fixtures: BTreeMap::new(),
            chat_fixtures: BTreeMap::new(),
            item_failures: BTreeMap::new(),
            faults: Mutex::new(VecDeque::new()),
            calls: AtomicU64::new(0),
            image_dims: 32,
            text_dims: 32,
            sigma: 0.05,
            usage_per_chat: (10, 2),
            usage_per_embed: (5, 0),
        }
    }

    /// Override the caption for one item.
    pub fn with_caption_fixture(mut self, item_id: &str, caption: &str) -> Self {
        self.caption_fixtures
            .insert(item_id.to_string(), caption.to_string());
        self
    }

    /// Override the raw chat response for one item (any prompt).
    pub fn with_chat_fixture(mut self, item_id: &str, text: &str) -> Self {
        self.chat_fixtures
            .insert(item_id.to_string(), text.to_string());
        self
    }

    /// Prepend scripted transport faults; each is consumed by one call.
    pub fn with_faults(self, faults: Vec<MockFault>) -> Self {
        *self.faults.lock().unwrap() = faults.into();
        self
    }

    /// Make one item fail inside its batch while the call itself succeeds.
    pub fn with_item_failure(mut self, item_id: &str, reason: &str) -> Self {
        self.item_failures
            .insert(item_id.to_string(), reason.to_string());
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_dims(mut self, image_dims: usize, text_dims: usize) -> Self {
        self.image_dims = image_dims;
        self.text_dims = text_dims;
        self
    }

    fn item_id_of(payload: Option<&ImagePayload>, fallback: &str) -> String {
        match payload {
            Some(ImagePayload::Reference(reference)) => reference.to_string(),
            _ => fallback.to_string(),
        }
    }

    fn answer(&self, request: &ChatRequest) -> String {
        if let Some(text) = self.chat_fixtures.get(&request.item_id) {
            return text.clone();
        }
        let prompt = request.prompt.as_str();
        if prompt.starts_with("Describe the image") {
            if let Some(text) = self.caption_fixtures.get(&request.item_id) {
                return text.clone();
            }
            return match self.labels.get(&request.item_id) {
                Some(class) => class_caption(*class),
                None => "A photo.".to_string(),
            };
        }
        if prompt.starts_with("Given the keywords:") {
            return self.label_keywords(prompt);
        }
        // VQA classification: echo the ground truth.
        match self.labels.get(&request.item_id) {
            Some(class) => class.canonical_name().to_string(),
            None => "I cannot classify this image.".to_string(),
        }
    }

    /// Pick the class whose keyword set overlaps the evidence most.
    fn label_keywords(&self, prompt: &str) -> String {
        let lowered = prompt.to_lowercase();
        let evidence: BTreeSet<String> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_string())
            .collect();
        let mut best: Option<(usize, CesClass)> = None;
        for class in CesClass::ALL {
            let hits = class_keywords(class)
                .iter()
                .filter(|k| evidence.contains(**k))
                .count();
            if hits > 0 {
                best = match best {
                    Some((top, _)) if top >= hits => best,
                    _ => Some((hits, class)),
                };
            }
        }
        match best {
            Some((_, class)) => class.canonical_name().to_string(),
            None => "none of these".to_string(),
        }
    }

    fn seeded_values(&self, tag: &str, key: &str, dims: usize) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(tag.as_bytes());
        hasher.update([0x1f]);
        hasher.update(key.as_bytes());
        hasher.update((dims as u64).to_le_bytes());
        let digest = hasher.finalize();
        let seed_bytes: [u8; 32] = digest.into();
        ChaCha8Rng::from_seed(seed_bytes)
    }

    /// Box-Muller standard normal draw.
    fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Ground truth may be keyed by the request's item id or, for raw
    /// transport calls, by the mock:// reference.
    fn image_embedding_with(&self, item_id: &str, reference: &str) -> Vec<f64> {
        let label = self
            .labels
            .get(item_id)
            .or_else(|| self.labels.get(reference));
        let mut values = vec![0.0f64; self.image_dims];
        if let Some(class) = label {
            values[class.index() % self.image_dims] = 10.0;
        }
        let mut rng = self.seeded_values("image", item_id, self.image_dims);
        for v in &mut values {
            *v += self.sigma * Self::gaussian(&mut rng);
        }
        values
    }

    fn text_embedding(&self, text: &str) -> Vec<f64> {
        let mut rng = self.seeded_values("text", text, self.text_dims);
        (0..self.text_dims).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }
}

impl Transport for MockBackend {
    fn chat(&self, requests: &[ChatRequest]) -> Result<Vec<ItemResult>, TransportFault> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(fault) = self.faults.lock().unwrap().pop_front() {
            return Err(fault.to_transport());
        }
        let usage = TokenUsage::new(self.usage_per_chat.0, self.usage_per_chat.1);
        Ok(requests
            .iter()
            .map(|request| {
                let effective_id = Self::item_id_of(request.image.as_ref(), &request.item_id);
                if let Some(reason) = self.item_failures.get(&effective_id).or_else(|| {
                    self.item_failures.get(&request.item_id)
                }) {
                    return Err(reason.clone());
                }
                let resolved = ChatRequest {
                    item_id: request.item_id.clone(),
                    prompt: request.prompt.clone(),
                    image: request.image.clone(),
                };
                Ok(ChatOutcome {
                    text: self.answer(&resolved),
                    usage,
                })
            })
            .collect())
    }

    fn embed(&self, request: &EmbedRequest) -> Result<EmbedOutcome, TransportFault> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(fault) = self.faults.lock().unwrap().pop_front() {
            return Err(fault.to_transport());
        }
        let values = match &request.input {
            EmbedInput::Text(text) => self.text_embedding(text),
            EmbedInput::Image(payload) => {
                let reference = Self::item_id_of(Some(payload), &request.item_id);
                self.image_embedding_with(&request.item_id, &reference)
            }
        };
        Ok(EmbedOutcome {
            dims: values.len(),
            values,
            usage: TokenUsage::new(self.usage_per_embed.0, self.usage_per_embed.1),
        })
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageRecord;

    fn manifest() -> DatasetManifest {
        let records = CesClass::ALL
            .iter()
            .enumerate()
            .map(|(i, class)| ImageRecord {
                id: format!("img{i}"),
                source: format!("mock://img{i}"),
                label: Some(*class),
                metadata: BTreeMap::new(),
            })
            .collect();
        DatasetManifest::new("m", "1", records)
    }

    #[test]
    fn keyword_sets_are_pairwise_disjoint_and_avoid_class_names() {
        let mut seen = BTreeSet::new();
        for class in CesClass::ALL {
            for word in class_keywords(class) {
                assert!(seen.insert(*word), "duplicate keyword {word}");
            }
        }
        for class in CesClass::ALL {
            for token in class.canonical_name().to_lowercase().split('-') {
                assert!(!seen.contains(token), "keyword collides with class name {token}");
            }
        }
    }

    #[test]
    fn echo_answers_vqa_with_true_class() {
        let backend = MockBackend::echo(&manifest(), 1);
        let request = ChatRequest {
            item_id: "img2".to_string(),
            prompt: "Classify the image into one of these categories: ...".to_string(),
            image: None,
        };
        let out = backend.chat(&[request]).unwrap();
        assert_eq!(out[0].as_ref().unwrap().text, "Gastronomy");
    }

    #[test]
    fn image_embeddings_cluster_by_class() {
        let backend = MockBackend::echo(&manifest(), 1);
        let a = backend.image_embedding_with("img0", "img0");
        let b = backend.image_embedding_with("img0", "img0");
        assert_eq!(a, b, "same item embeds identically");
        let other = backend.image_embedding_with("img3", "img3");
        let dist: f64 = a
            .iter()
            .zip(&other)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 5.0, "classes are far apart: {dist}");
    }

    #[test]
    fn keyword_labeler_resolves_gastronomy() {
        let backend = MockBackend::echo(&manifest(), 1);
        let text = backend
            .label_keywords("Given the keywords: food, wine, restaurant, dish. Which category best describes them: ...");
        assert_eq!(text, "Gastronomy");
        let none = backend.label_keywords("Given the keywords: xyzzy, quux.");
        assert_eq!(none, "none of these");
    }
}
