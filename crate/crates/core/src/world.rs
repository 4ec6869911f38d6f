//! Synthetic navigation world.
//!
//! Houses contain rooms; every room has a feature-space center and an
//! instruction token. Trajectories are room walks whose frames are noisy
//! samples around the visited room centers, and instructions spell out the
//! visited rooms in order. Everything is a pure function of the config seed.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};

pub type HouseId = u32;
/// Global room identifier; rooms of house `h` occupy
/// `h * rooms_per_house .. (h + 1) * rooms_per_house`.
pub type RoomId = u32;
pub type TokenId = u32;

/// Token 0 is reserved for instruction padding.
pub const PAD_TOKEN: TokenId = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_houses_seen: usize,
    pub n_houses_unseen: usize,
    pub rooms_per_house: usize,
    pub frame_dim: usize,
    pub vocab_size: usize,
    pub traj_len: usize,
    pub instr_len: usize,
    pub frame_noise_sigma: f64,
    pub distractor_token_rate: f64,
    pub seed: u64,
    /// Size of the shared room-type catalog. Rooms of the same type share an
    /// instruction token across houses and have nearby centers. Zero gives
    /// every room its own token and an independent center.
    pub n_room_types: usize,
    /// Spread of a room center around its type prototype.
    pub house_style_sigma: f64,
    /// Probability that a walk stays in the current room for the next frame.
    pub stay_prob: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_houses_seen: 20,
            n_houses_unseen: 5,
            rooms_per_house: 6,
            frame_dim: 16,
            vocab_size: 160,
            traj_len: 8,
            instr_len: 12,
            frame_noise_sigma: 0.3,
            distractor_token_rate: 0.1,
            seed: 0,
            n_room_types: 12,
            house_style_sigma: 0.5,
            stay_prob: 0.3,
        }
    }
}

impl WorldConfig {
    pub fn n_houses(&self) -> usize {
        self.n_houses_seen + self.n_houses_unseen
    }

    pub fn n_rooms(&self) -> usize {
        self.n_houses() * self.rooms_per_house
    }

    /// Number of tokens that name rooms (ids `1..=n_room_tokens`).
    pub fn n_room_tokens(&self) -> usize {
        if self.n_room_types == 0 {
            self.n_rooms()
        } else {
            self.n_room_types
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_houses_seen", self.n_houses_seen),
            ("n_houses_unseen", self.n_houses_unseen),
            ("rooms_per_house", self.rooms_per_house),
            ("frame_dim", self.frame_dim),
            ("vocab_size", self.vocab_size),
            ("traj_len", self.traj_len),
            ("instr_len", self.instr_len),
        ];
        for (field, value) in counts {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.traj_len < 2 {
            return Err(Error::config("traj_len", "must be at least 2"));
        }
        if self.vocab_size < self.n_rooms() + 1 {
            return Err(Error::config(
                "vocab_size",
                format!(
                    "must be at least rooms_per_house * houses + 1 = {}",
                    self.n_rooms() + 1
                ),
            ));
        }
        if !(self.frame_noise_sigma.is_finite() && self.frame_noise_sigma >= 0.0) {
            return Err(Error::config("frame_noise_sigma", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.distractor_token_rate) {
            return Err(Error::config("distractor_token_rate", "must lie in [0, 1]"));
        }
        if self.distractor_token_rate > 0.0 && self.vocab_size < self.n_room_tokens() + 2 {
            return Err(Error::config(
                "distractor_token_rate",
                "no distractor tokens left in the vocabulary",
            ));
        }
        if self.n_room_types != 0 && self.n_room_types < self.rooms_per_house {
            return Err(Error::config(
                "n_room_types",
                "must be 0 or at least rooms_per_house",
            ));
        }
        if !(self.house_style_sigma.is_finite() && self.house_style_sigma >= 0.0) {
            return Err(Error::config("house_style_sigma", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.stay_prob) {
            return Err(Error::config("stay_prob", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Seen => 0,
            Split::Unseen => 1,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Frame {
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
    /// Source room of every frame. Replaced frames keep the id of the room
    /// they were drawn from, which may belong to another house.
    #[serde(rename = "rooms")]
    pub room_sequence: Vec<RoomId>,
    #[serde(rename = "house")]
    pub house_id: HouseId,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Number of frame positions whose features differ.
    pub fn frame_hamming(&self, other: &Trajectory) -> usize {
        self.frames
            .iter()
            .zip(&other.frames)
            .filter(|(a, b)| a != b)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Instruction {
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub positive: Trajectory,
    pub instruction: Instruction,
    #[serde(rename = "negatives")]
    pub coarse_negatives: Vec<Trajectory>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    /// Indexed by global room id.
    pub room_centers: Vec<Vec<f64>>,
    pub room_tokens: Vec<TokenId>,
    pub seen_houses: Vec<HouseId>,
    pub unseen_houses: Vec<HouseId>,
}

impl World {
    pub fn houses(&self, split: Split) -> &[HouseId] {
        match split {
            Split::Seen => &self.seen_houses,
            Split::Unseen => &self.unseen_houses,
        }
    }

    pub fn split_of(&self, house: HouseId) -> Split {
        if (house as usize) < self.config.n_houses_seen {
            Split::Seen
        } else {
            Split::Unseen
        }
    }

    pub fn house_of(&self, room: RoomId) -> HouseId {
        room / self.config.rooms_per_house as u32
    }

    pub fn rooms_of(&self, house: HouseId) -> std::ops::Range<RoomId> {
        let r = self.config.rooms_per_house as u32;
        house * r..(house + 1) * r
    }

    /// Draws one frame around the center of `room`.
    pub fn sample_frame(&self, room: RoomId, rng: &mut Rng) -> Frame {
        let sigma = self.config.frame_noise_sigma;
        let features = self.room_centers[room as usize]
            .iter()
            .map(|&c| {
                let z: f64 = rng.sample(StandardNormal);
                c + sigma * z
            })
            .collect();
        Frame { features }
    }

    fn distractor_range(&self) -> std::ops::Range<TokenId> {
        (self.config.n_room_tokens() as u32 + 1)..self.config.vocab_size as u32
    }

    /// Room sequence of a walk of `len` frames starting in `start`.
    fn walk(&self, start: RoomId, len: usize, rng: &mut Rng) -> Vec<RoomId> {
        let rooms = self.rooms_of(self.house_of(start));
        let n = rooms.len() as u32;
        let mut seq = Vec::with_capacity(len);
        let mut cur = start;
        seq.push(cur);
        for _ in 1..len {
            if n > 1 && rng.random::<f64>() >= self.config.stay_prob {
                // uniform over the other rooms of the house
                let offset = rng.random_range(1..n);
                cur = rooms.start + (cur - rooms.start + offset) % n;
            }
            seq.push(cur);
        }
        seq
    }

    fn trajectory(&self, rooms: Vec<RoomId>, rng: &mut Rng) -> Trajectory {
        let frames = rooms.iter().map(|&r| self.sample_frame(r, rng)).collect();
        Trajectory {
            frames,
            house_id: self.house_of(rooms[0]),
            room_sequence: rooms,
        }
    }

    fn instruction_for(&self, rooms: &[RoomId], rng: &mut Rng) -> Instruction {
        let t = self.config.instr_len;
        let mut named: Vec<TokenId> = Vec::new();
        let mut last = None;
        for &room in rooms {
            if last != Some(room) {
                named.push(self.room_tokens[room as usize]);
                last = Some(room);
            }
        }
        named.truncate(t);

        let distractors = self.distractor_range();
        let rate = self.config.distractor_token_rate;
        let mut tokens = Vec::with_capacity(t);
        for (i, &tok) in named.iter().enumerate() {
            let remaining = named.len() - i;
            if rate > 0.0 && tokens.len() + remaining < t && rng.random::<f64>() < rate {
                tokens.push(rng.random_range(distractors.clone()));
            }
            tokens.push(tok);
        }
        tokens.resize(t, PAD_TOKEN);
        Instruction { tokens }
    }
}

fn room_set(rooms: &[RoomId]) -> Vec<RoomId> {
    let mut s = rooms.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

fn gaussian_vec(dim: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        })
        .collect()
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, &[tag::WORLD]);
    let d = cfg.frame_dim;

    let prototypes: Vec<Vec<f64>> = (0..cfg.n_room_types)
        .map(|_| gaussian_vec(d, 1.0, &mut rng))
        .collect();

    let mut room_centers = Vec::with_capacity(cfg.n_rooms());
    let mut room_tokens = Vec::with_capacity(cfg.n_rooms());
    for _house in 0..cfg.n_houses() {
        if cfg.n_room_types == 0 {
            for _ in 0..cfg.rooms_per_house {
                room_tokens.push(room_tokens.len() as TokenId + 1);
                room_centers.push(gaussian_vec(d, 1.0, &mut rng));
            }
        } else {
            let mut types = index::sample(&mut rng, cfg.n_room_types, cfg.rooms_per_house).into_vec();
            types.sort_unstable();
            for ty in types {
                room_tokens.push(ty as TokenId + 1);
                let offset = gaussian_vec(d, cfg.house_style_sigma, &mut rng);
                room_centers.push(
                    prototypes[ty]
                        .iter()
                        .zip(offset)
                        .map(|(p, o)| p + o)
                        .collect(),
                );
            }
        }
    }

    let seen_houses = (0..cfg.n_houses_seen as HouseId).collect();
    let unseen_houses = (cfg.n_houses_seen as HouseId..cfg.n_houses() as HouseId).collect();
    Ok(World {
        config: cfg.clone(),
        room_centers,
        room_tokens,
        seen_houses,
        unseen_houses,
    })
}

const MAX_ALT_ATTEMPTS: usize = 1000;

/// Samples one positive pair and `n_coarse` alternate-path negatives.
///
/// Alternate paths start in the positive's first room (so they share its
/// starting viewpoint) and must visit a different set of rooms.
pub fn sample_episode(world: &World, split: Split, n_coarse: usize, rng: &mut Rng) -> Result<Episode> {
    if n_coarse == 0 {
        return Err(Error::config("n_coarse", "must be at least 1"));
    }
    let houses = world.houses(split);
    if houses.is_empty() {
        return Err(Error::Generation(format!("split `{split}` has no houses")));
    }
    let k = world.config.traj_len;
    let house = houses[rng.random_range(0..houses.len())];
    let rooms = world.rooms_of(house);
    let start = rng.random_range(rooms);

    let pos_rooms = world.walk(start, k, rng);
    let pos_set = room_set(&pos_rooms);
    let instruction = world.instruction_for(&pos_rooms, rng);
    let positive = world.trajectory(pos_rooms, rng);

    let mut coarse_negatives = Vec::with_capacity(n_coarse);
    for _ in 0..n_coarse {
        let mut attempts = 0;
        let alt = loop {
            let alt = world.walk(start, k, rng);
            if room_set(&alt) != pos_set {
                break alt;
            }
            attempts += 1;
            if attempts >= MAX_ALT_ATTEMPTS {
                return Err(Error::Generation(format!(
                    "could not find an alternate path in house {house}"
                )));
            }
        };
        coarse_negatives.push(world.trajectory(alt, rng));
    }

    Ok(Episode {
        positive,
        instruction,
        coarse_negatives,
        split,
    })
}

/// Episode `i` uses its own stream derived from `(seed, split, i)`, so the
/// list is independent of generation order.
pub fn dataset(world: &World, split: Split, n_episodes: usize, n_coarse: usize, seed: u64) -> Result<Vec<Episode>> {
    if n_episodes == 0 {
        return Err(Error::config("n_episodes", "must be at least 1"));
    }
    (0..n_episodes as u64)
        .map(|i| {
            let mut rng = rng::stream(seed, &[tag::EPISODE, split.tag(), i]);
            sample_episode(world, split, n_coarse, &mut rng)
        })
        .collect()
}

/// One JSON object per line, in list order.
pub fn to_jsonl(episodes: &[Episode]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for ep in episodes {
        serde_json::to_writer(&mut out, ep)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, episodes: &[Episode]) -> Result<()> {
    std::fs::write(path, to_jsonl(episodes)?).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Episode>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut episodes = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        episodes.push(serde_json::from_str(&line)?);
    }
    Ok(episodes)
}

/// Checks the fixed-shape contract of an episode against a world.
pub fn check_episode(world: &World, ep: &Episode) -> Result<()> {
    let cfg = &world.config;
    let check_traj = |t: &Trajectory| -> Result<()> {
        if t.frames.len() != cfg.traj_len || t.room_sequence.len() != cfg.traj_len {
            return Err(Error::Load(format!(
                "trajectory has {} frames, expected {}",
                t.frames.len(),
                cfg.traj_len
            )));
        }
        if t.frames.iter().any(|f| f.features.len() != cfg.frame_dim) {
            return Err(Error::Load("frame dimension mismatch".into()));
        }
        Ok(())
    };
    check_traj(&ep.positive)?;
    for n in &ep.coarse_negatives {
        check_traj(n)?;
    }
    if ep.instruction.tokens.len() != cfg.instr_len {
        return Err(Error::Load("instruction length mismatch".into()));
    }
    if ep.instruction.tokens.iter().any(|&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Load("instruction token outside vocabulary".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_houses_seen: 2,
            n_houses_unseen: 1,
            vocab_size: 40,
            seed: 11,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_config_gives_identical_world() {
        let a = serde_json::to_vec(&generate_world(&small()).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_world(&small()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn house_partition_is_disjoint() {
        let w = generate_world(&small()).unwrap();
        assert_eq!(w.seen_houses, vec![0, 1]);
        assert_eq!(w.unseen_houses, vec![2]);
        assert!(w.seen_houses.iter().all(|h| !w.unseen_houses.contains(h)));
    }

    #[test]
    fn per_room_tokens_are_unique() {
        let cfg = WorldConfig { n_room_types: 0, ..small() };
        let w = generate_world(&cfg).unwrap();
        let mut toks = w.room_tokens.clone();
        toks.sort_unstable();
        toks.dedup();
        assert_eq!(toks.len(), w.room_tokens.len());
        assert!(!toks.contains(&PAD_TOKEN));
    }

    #[test]
    fn shared_tokens_are_unique_within_a_house() {
        let w = generate_world(&small()).unwrap();
        for h in 0..3 {
            let mut toks: Vec<_> = w.rooms_of(h).map(|r| w.room_tokens[r as usize]).collect();
            toks.sort_unstable();
            toks.dedup();
            assert_eq!(toks.len(), 6);
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases: Vec<(WorldConfig, &str)> = vec![
            (WorldConfig { n_houses_unseen: 0, ..small() }, "n_houses_unseen"),
            (WorldConfig { traj_len: 1, ..small() }, "traj_len"),
            (WorldConfig { vocab_size: 10, ..small() }, "vocab_size"),
            (WorldConfig { distractor_token_rate: 1.5, ..small() }, "distractor_token_rate"),
        ];
        for (cfg, field) in cases {
            match generate_world(&cfg) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn frame_noise_stays_within_six_sigma_ball() {
        // Monte-Carlo oracle for the Gaussian tail bound.
        let w = generate_world(&small()).unwrap();
        let sigma = w.config.frame_noise_sigma;
        let bound = 6.0 * sigma * (w.config.frame_dim as f64).sqrt();
        let mut rng = rng::stream(3, &[]);
        let n = 100_000;
        let inside = (0..n)
            .filter(|_| {
                let f = w.sample_frame(4, &mut rng);
                let d2: f64 = f
                    .features
                    .iter()
                    .zip(&w.room_centers[4])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                d2.sqrt() <= bound
            })
            .count();
        assert!(inside as f64 >= 0.999 * n as f64);
    }

    #[test]
    fn zero_distractor_rate_gives_deduplicated_rooms() {
        let cfg = WorldConfig { distractor_token_rate: 0.0, ..small() };
        let w = generate_world(&cfg).unwrap();
        let eps = dataset(&w, Split::Seen, 50, 3, 1).unwrap();
        for ep in eps {
            let mut expect: Vec<TokenId> = Vec::new();
            for &r in &ep.positive.room_sequence {
                let t = w.room_tokens[r as usize];
                if expect.last() != Some(&t) {
                    expect.push(t);
                }
            }
            expect.resize(cfg.instr_len, PAD_TOKEN);
            assert_eq!(ep.instruction.tokens, expect);
        }
    }

    #[test]
    fn episodes_have_requested_coarse_negatives() {
        let w = generate_world(&small()).unwrap();
        let mut rng = rng::stream(5, &[]);
        let ep = sample_episode(&w, Split::Seen, 3, &mut rng).unwrap();
        assert_eq!(ep.coarse_negatives.len(), 3);
        for n in &ep.coarse_negatives {
            assert_ne!(n.room_sequence, ep.positive.room_sequence);
            assert_eq!(n.house_id, ep.positive.house_id);
        }
    }

    #[test]
    fn coarse_negative_never_equals_positive() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let eps = dataset(&w, Split::Seen, 1000, 3, 9).unwrap();
        let hits = eps
            .iter()
            .flat_map(|ep| ep.coarse_negatives.iter().map(move |n| (n, &ep.positive)))
            .filter(|(n, p)| n.room_sequence == p.room_sequence || n.frames == p.frames)
            .count();
        assert_eq!(hits, 0);
    }

    #[test]
    fn dataset_is_deterministic_and_seed_sensitive() {
        let w = generate_world(&small()).unwrap();
        let a = dataset(&w, Split::Seen, 10, 3, 7).unwrap();
        let b = dataset(&w, Split::Seen, 10, 3, 7).unwrap();
        let c = dataset(&w, Split::Seen, 10, 3, 8).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().zip(&c).any(|(x, y)| x != y));
    }

    #[test]
    fn unseen_split_uses_unseen_houses_only() {
        let cfg = WorldConfig { n_room_types: 0, ..small() };
        let w = generate_world(&cfg).unwrap();
        let unseen = dataset(&w, Split::Unseen, 30, 3, 2).unwrap();
        assert!(unseen.iter().all(|e| w.unseen_houses.contains(&e.positive.house_id)));

        let seen = dataset(&w, Split::Seen, 200, 3, 2).unwrap();
        let unseen_rooms: Vec<RoomId> = w.unseen_houses.iter().flat_map(|&h| w.rooms_of(h)).collect();
        let unseen_tokens: Vec<TokenId> = unseen_rooms.iter().map(|&r| w.room_tokens[r as usize]).collect();
        for ep in &seen {
            assert!(!w.unseen_houses.contains(&ep.positive.house_id));
            for t in std::iter::once(&ep.positive).chain(&ep.coarse_negatives) {
                assert!(t.room_sequence.iter().all(|r| !unseen_rooms.contains(r)));
                for f in &t.frames {
                    assert!(unseen_rooms.iter().all(|&r| w.room_centers[r as usize] != f.features));
                }
            }
            assert!(ep.instruction.tokens.iter().all(|t| !unseen_tokens.contains(t)));
        }
    }

    #[test]
    fn single_room_house_cannot_produce_alternate_paths() {
        let cfg = WorldConfig { rooms_per_house: 1, n_room_types: 0, ..small() };
        let w = generate_world(&cfg).unwrap();
        let mut rng = rng::stream(1, &[]);
        assert!(matches!(sample_episode(&w, Split::Seen, 1, &mut rng), Err(Error::Generation(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let w = generate_world(&small()).unwrap();
        let eps = dataset(&w, Split::Unseen, 4, 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_unseen.jsonl");
        write_jsonl(&p, &eps).unwrap();
        let back = read_jsonl(&p).unwrap();
        assert_eq!(back, eps);
        let first = std::fs::read_to_string(&p).unwrap();
        let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        for key in ["positive", "instruction", "negatives", "split"] {
            assert!(rec.get(key).is_some(), "missing {key}");
        }
        for key in ["frames", "rooms", "house"] {
            assert!(rec["positive"].get(key).is_some(), "missing positive.{key}");
        }
    }
}
