//! Study state, sessions and votes behind a single lock. Every mutation is
//! validated, appended to the event log, then applied, so a failed write
//! leaves state unchanged and replay reproduces the same state.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};
use std::time::{SystemTime, UNIX_EPOCH};

use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::definition::{StudyDefinition, View};
use crate::error::{Result, StudyError};
use crate::log::{Event, EventLog};
use crate::render::{render_png, ImageLibrary};
use crate::report::{build_report, StudyReport};

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(ms: u64) -> Self {
        ManualClock(AtomicU64::new(ms))
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Hidden origin of a displayed image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Source {
    Real,
    Model(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Active,
    Completed,
    Expired,
}

#[derive(Debug, Clone)]
pub(crate) struct Scheduled {
    pub pair: usize,
    pub token: String,
    /// The pair's first image (real, or model A) is shown on the right.
    pub swapped: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct VoteRecord {
    pub pair: usize,
    pub side: Side,
    pub chose_first: bool,
    pub likert: Option<u8>,
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Session {
    pub study_id: String,
    pub rater_id: String,
    pub expires_at_ms: u64,
    pub schedule: Vec<Scheduled>,
    pub votes: Vec<VoteRecord>,
}

impl Session {
    pub fn is_completed(&self) -> bool {
        self.votes.len() == self.schedule.len()
    }

    pub fn state(&self, now_ms: u64) -> SessionState {
        if self.is_completed() {
            SessionState::Completed
        } else if now_ms >= self.expires_at_ms {
            SessionState::Expired
        } else {
            SessionState::Active
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Study {
    pub definition: StudyDefinition,
    pub sessions: Vec<String>,
}

/// Section (1 or 2) and images of pair `idx` in schedule index space:
/// section 1 pairs first, then section 2.
pub(crate) fn pair_parts(def: &StudyDefinition, idx: usize) -> (u8, [(&str, Source); 2], View) {
    let n1 = def.section1.len();
    if idx < n1 {
        let p = &def.section1[idx];
        (
            1,
            [
                (p.real.as_str(), Source::Real),
                (p.synthetic.volume.as_str(), Source::Model(p.synthetic.model.clone())),
            ],
            p.view,
        )
    } else {
        let p = &def.section2[idx - n1];
        (
            2,
            [
                (p.a.volume.as_str(), Source::Model(p.a.model.clone())),
                (p.b.volume.as_str(), Source::Model(p.b.model.clone())),
            ],
            p.view,
        )
    }
}

/// Pair order (section 1 shuffled, then section 2 shuffled), placement
/// and tokens, all derived from `seed`.
pub(crate) fn build_schedule(def: &StudyDefinition, seed: u64) -> Vec<Scheduled> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n1 = def.section1.len();
    let mut s1: Vec<usize> = (0..n1).collect();
    let mut s2: Vec<usize> = (n1..def.total_pairs()).collect();
    s1.shuffle(&mut rng);
    s2.shuffle(&mut rng);
    let mut seen = HashSet::new();
    s1.into_iter()
        .chain(s2)
        .map(|pair| {
            let swapped = rng.random_bool(0.5);
            let token = loop {
                let t = format!("{:016x}", rng.random::<u64>());
                if seen.insert(t.clone()) {
                    break t;
                }
            };
            Scheduled { pair, token, swapped }
        })
        .collect()
}

#[derive(Debug)]
struct State {
    studies: BTreeMap<String, Study>,
    sessions: HashMap<String, Session>,
    rng: ChaCha8Rng,
    log: Option<EventLog>,
}

impl State {
    fn session(&self, id: &str) -> Result<&Session> {
        self.sessions
            .get(id)
            .ok_or_else(|| StudyError::NotFound(format!("session {id:?}")))
    }

    fn study(&self, id: &str) -> Result<&Study> {
        self.studies
            .get(id)
            .ok_or_else(|| StudyError::NotFound(format!("study {id:?}")))
    }

    fn check_study(&self, library: &ImageLibrary, study_id: &str, def: &StudyDefinition) -> Result<()> {
        if self.studies.contains_key(study_id) {
            return Err(StudyError::Conflict(format!("study {study_id:?} exists")));
        }
        def.validate(library)
    }

    fn check_session(&self, session_id: &str, study_id: &str, rater_id: &str, now: u64) -> Result<()> {
        if rater_id.trim().is_empty() {
            return Err(StudyError::Validation("rater_id must be non-empty".into()));
        }
        let study = self.study(study_id)?;
        if self.sessions.contains_key(session_id) {
            return Err(StudyError::Conflict(format!("session {session_id:?} exists")));
        }
        for s in study.sessions.iter().map(|id| &self.sessions[id]) {
            if s.rater_id != rater_id {
                continue;
            }
            match s.state(now) {
                SessionState::Completed => {
                    return Err(StudyError::Conflict("rater has already completed this study".into()))
                }
                SessionState::Active => return Err(StudyError::Conflict("rater already has an active session".into())),
                SessionState::Expired => {}
            }
        }
        Ok(())
    }

    fn check_vote(&self, session_id: &str, req: &VoteRequest, now: u64) -> Result<VoteRecord> {
        let session = self.session(session_id)?;
        match session.state(now) {
            SessionState::Completed => return Err(StudyError::Conflict("session is already completed".into())),
            SessionState::Expired => return Err(StudyError::Expired),
            SessionState::Active => {}
        }
        let answered = session.votes.len();
        let pos = session
            .schedule
            .iter()
            .position(|s| s.token == req.pair_token)
            .ok_or_else(|| StudyError::NotFound(format!("pair {:?} in this session", req.pair_token)))?;
        if pos < answered {
            return Err(StudyError::Conflict("pair has already been answered".into()));
        }
        if pos > answered {
            return Err(StudyError::Conflict("pair is not the current pair".into()));
        }
        let scheduled = &session.schedule[pos];
        let def = &self.studies[self.study_of(session_id)].definition;
        let (section, _, _) = pair_parts(def, scheduled.pair);
        match (section, req.likert) {
            (1, None) => return Err(StudyError::Validation("a likert rating is required for this pair".into())),
            (1, Some(l)) if !(1..=5).contains(&l) => {
                return Err(StudyError::Validation(format!("likert rating must be in 1..=5, got {l}")))
            }
            (2, Some(_)) => return Err(StudyError::Validation("a likert rating is not accepted for this pair".into())),
            _ => {}
        }
        Ok(VoteRecord {
            pair: scheduled.pair,
            side: req.side,
            chose_first: (req.side == Side::Left) != scheduled.swapped,
            likert: req.likert,
            latency_ms: req.latency_ms,
        })
    }

    fn study_of(&self, session_id: &str) -> &str {
        &self.sessions[session_id].study_id
    }

    /// Validates and applies one event.
    fn apply(&mut self, library: &ImageLibrary, event: &Event) -> Result<()> {
        match event {
            Event::StudyCreated {
                study_id, definition, ..
            } => {
                self.check_study(library, study_id, definition)?;
                self.studies.insert(
                    study_id.clone(),
                    Study {
                        definition: definition.clone(),
                        sessions: Vec::new(),
                    },
                );
            }
            Event::SessionCreated {
                session_id,
                study_id,
                rater_id,
                seed,
                at_ms,
                expires_at_ms,
            } => {
                self.check_session(session_id, study_id, rater_id, *at_ms)?;
                let study = self.studies.get_mut(study_id).expect("checked");
                study.sessions.push(session_id.clone());
                self.sessions.insert(
                    session_id.clone(),
                    Session {
                        study_id: study_id.clone(),
                        rater_id: rater_id.clone(),
                        expires_at_ms: *expires_at_ms,
                        schedule: build_schedule(&study.definition, *seed),
                        votes: Vec::new(),
                    },
                );
            }
            Event::VoteCast {
                session_id,
                pair_token,
                side,
                likert,
                latency_ms,
                at_ms,
            } => {
                let req = VoteRequest {
                    pair_token: pair_token.clone(),
                    side: *side,
                    likert: *likert,
                    latency_ms: *latency_ms,
                };
                let record = self.check_vote(session_id, &req, *at_ms)?;
                self.sessions.get_mut(session_id).expect("checked").votes.push(record);
            }
        }
        Ok(())
    }

    /// Logs then applies an event already validated by the caller.
    fn commit(&mut self, library: &ImageLibrary, event: Event) -> Result<()> {
        if let Some(log) = self.log.as_mut() {
            log.append(&event)?;
        }
        self.apply(library, &event)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Seed for generated ids and unseeded session schedules.
    pub seed: u64,
    /// Event log; `None` keeps everything in memory.
    pub log_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyCreated {
    pub study_id: String,
    pub section1_pairs: usize,
    pub section2_pairs: usize,
    pub total_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub total_pairs: usize,
    pub expires_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteRequest {
    pub pair_token: String,
    pub side: Side,
    #[serde(default)]
    pub likert: Option<u8>,
    #[serde(default)]
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteAck {
    pub answered: usize,
    pub remaining: usize,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairImage {
    pub width: u32,
    pub height: u32,
    pub png_base64: String,
}

/// What a rater sees for one pair: two images and no origin information.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPayload {
    pub pair_token: String,
    /// 1-based position in the session.
    pub position: usize,
    pub total: usize,
    pub section: u8,
    pub likert_required: bool,
    pub likert_labels: Option<[String; 5]>,
    pub view: View,
    pub expires_at_ms: u64,
    pub left: PairImage,
    pub right: PairImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextPair {
    Pair(PairPayload),
    Completed { answered: usize, total: usize },
}

struct Current {
    section: u8,
    volumes: [String; 2],
    view: View,
    token: String,
    swapped: bool,
    position: usize,
    total: usize,
    expires_at_ms: u64,
    labels: [String; 5],
}

pub struct StudyService {
    library: Arc<ImageLibrary>,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
}

impl StudyService {
    /// Opens the service, replaying the event log if one is configured.
    pub fn open(library: Arc<ImageLibrary>, clock: Arc<dyn Clock>, config: ServiceConfig) -> Result<Self> {
        let (log, events) = match &config.log_path {
            Some(path) => {
                let (log, events) = EventLog::open(path)?;
                (Some(log), events)
            }
            None => (None, Vec::new()),
        };
        let mut state = State {
            studies: BTreeMap::new(),
            sessions: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ (events.len() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            log: None,
        };
        for (i, ev) in events.iter().enumerate() {
            state.apply(&library, ev).map_err(|e| StudyError::Replay {
                path: config.log_path.clone().unwrap_or_default(),
                line: i + 1,
                detail: e.to_string(),
            })?;
        }
        state.log = log;
        Ok(StudyService {
            library,
            clock,
            state: Mutex::new(state),
        })
    }

    pub fn in_memory(library: Arc<ImageLibrary>, clock: Arc<dyn Clock>, seed: u64) -> Self {
        Self::open(library, clock, ServiceConfig { seed, log_path: None }).expect("no log to replay")
    }

    pub fn library(&self) -> &ImageLibrary {
        &self.library
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(PoisonError::into_inner)
    }

    pub fn create_study(&self, definition: StudyDefinition) -> Result<StudyCreated> {
        let now = self.clock.now_ms();
        let mut st = self.lock();
        let study_id = (st.studies.len() + 1..)
            .map(|n| format!("study-{n:04}"))
            .find(|id| !st.studies.contains_key(id))
            .expect("unbounded range");
        st.check_study(&self.library, &study_id, &definition)?;
        let created = StudyCreated {
            study_id: study_id.clone(),
            section1_pairs: definition.section1.len(),
            section2_pairs: definition.section2.len(),
            total_pairs: definition.total_pairs(),
        };
        st.commit(
            &self.library,
            Event::StudyCreated {
                study_id,
                definition,
                at_ms: now,
            },
        )?;
        Ok(created)
    }

    /// Study ids in creation order.
    pub fn study_ids(&self) -> Vec<String> {
        self.lock().studies.keys().cloned().collect()
    }

    /// The first study whose definition has this name.
    pub fn study_id_by_name(&self, name: &str) -> Option<String> {
        let st = self.lock();
        st.studies
            .iter()
            .find(|(_, s)| s.definition.name == name)
            .map(|(id, _)| id.clone())
    }

    pub fn definition(&self, study_id: &str) -> Result<StudyDefinition> {
        Ok(self.lock().study(study_id)?.definition.clone())
    }

    /// Starts a session. `seed` fixes the schedule; `None` draws one.
    pub fn create_session(&self, study_id: &str, rater_id: &str, seed: Option<u64>) -> Result<SessionCreated> {
        let now = self.clock.now_ms();
        let mut st = self.lock();
        let (total, expiry) = {
            let def = &st.study(study_id)?.definition;
            (def.total_pairs(), def.expiry_minutes)
        };
        let seed = seed.unwrap_or_else(|| st.rng.random());
        let session_id = loop {
            let id = format!("session-{:016x}", st.rng.random::<u64>());
            if !st.sessions.contains_key(&id) {
                break id;
            }
        };
        st.check_session(&session_id, study_id, rater_id, now)?;
        let expires_at_ms = now + expiry * 60_000;
        st.commit(
            &self.library,
            Event::SessionCreated {
                session_id: session_id.clone(),
                study_id: study_id.to_string(),
                rater_id: rater_id.to_string(),
                seed,
                at_ms: now,
                expires_at_ms,
            },
        )?;
        Ok(SessionCreated {
            session_id,
            total_pairs: total,
            expires_at_ms,
        })
    }

    pub fn session_state(&self, session_id: &str) -> Result<SessionState> {
        let now = self.clock.now_ms();
        Ok(self.lock().session(session_id)?.state(now))
    }

    fn current(&self, session_id: &str) -> Result<Result<Current, usize>> {
        let now = self.clock.now_ms();
        let st = self.lock();
        let session = st.session(session_id)?;
        let total = session.schedule.len();
        match session.state(now) {
            SessionState::Expired => return Err(StudyError::Expired),
            SessionState::Completed => return Ok(Err(total)),
            SessionState::Active => {}
        }
        let cur = &session.schedule[session.votes.len()];
        let def = &st.studies[st.study_of(session_id)].definition;
        let (section, parts, view) = pair_parts(def, cur.pair);
        Ok(Ok(Current {
            section,
            volumes: [parts[0].0.to_string(), parts[1].0.to_string()],
            view,
            token: cur.token.clone(),
            swapped: cur.swapped,
            position: session.votes.len() + 1,
            total,
            expires_at_ms: session.expires_at_ms,
            labels: def.likert_labels.clone(),
        }))
    }

    /// Token and section of the current pair without rendering images;
    /// `None` once the session is complete.
    pub fn next_pair_token(&self, session_id: &str) -> Result<Option<(String, u8)>> {
        Ok(self.current(session_id)?.ok().map(|c| (c.token, c.section)))
    }

    /// The current unanswered pair, or a completion marker.
    pub fn next_pair(&self, session_id: &str) -> Result<NextPair> {
        let Current {
            section,
            volumes,
            view,
            token,
            swapped,
            position,
            total,
            expires_at_ms,
            labels,
        } = match self.current(session_id)? {
            Ok(c) => c,
            Err(total) => return Ok(NextPair::Completed { answered: total, total }),
        };
        let image = |id: &str| -> Result<PairImage> {
            let vol = self
                .library
                .get(id)
                .ok_or_else(|| StudyError::Library(format!("volume {id:?} disappeared")))?;
            let png = render_png(vol, view)?;
            let (height, width) = match view.plane {
                crate::definition::Plane::Axial => (vol.shape[1], vol.shape[2]),
                crate::definition::Plane::Coronal => (vol.shape[0], vol.shape[2]),
                crate::definition::Plane::Sagittal => (vol.shape[0], vol.shape[1]),
            };
            Ok(PairImage {
                width: width as u32,
                height: height as u32,
                png_base64: base64::engine::general_purpose::STANDARD.encode(png),
            })
        };
        let (first, second) = (image(&volumes[0])?, image(&volumes[1])?);
        let (left, right) = if swapped { (second, first) } else { (first, second) };
        Ok(NextPair::Pair(PairPayload {
            pair_token: token,
            position,
            total,
            section,
            likert_required: section == 1,
            likert_labels: (section == 1).then_some(labels),
            view,
            expires_at_ms,
            left,
            right,
        }))
    }

    pub fn submit_vote(&self, session_id: &str, vote: VoteRequest) -> Result<VoteAck> {
        let now = self.clock.now_ms();
        let mut st = self.lock();
        st.check_vote(session_id, &vote, now)?;
        st.commit(
            &self.library,
            Event::VoteCast {
                session_id: session_id.to_string(),
                pair_token: vote.pair_token,
                side: vote.side,
                likert: vote.likert,
                latency_ms: vote.latency_ms,
                at_ms: now,
            },
        )?;
        let s = st.session(session_id)?;
        let answered = s.votes.len();
        Ok(VoteAck {
            answered,
            remaining: s.schedule.len() - answered,
            completed: answered == s.schedule.len(),
        })
    }

    /// Aggregates over completed sessions, read under one lock.
    pub fn report(&self, study_id: &str) -> Result<StudyReport> {
        let st = self.lock();
        let study = st.study(study_id)?;
        let sessions: Vec<&Session> = study.sessions.iter().map(|id| &st.sessions[id]).collect();
        build_report(study_id, &study.definition, &sessions)
    }

    /// Origins of the `(left, right)` images of a scheduled pair. This is
    /// for simulated raters and audits; no HTTP route exposes it.
    pub fn hidden_sources(&self, session_id: &str, pair_token: &str) -> Result<(Source, Source)> {
        let st = self.lock();
        let session = st.session(session_id)?;
        let cur = session
            .schedule
            .iter()
            .find(|s| s.token == pair_token)
            .ok_or_else(|| StudyError::NotFound(format!("pair {pair_token:?} in this session")))?;
        let def = &st.studies[st.study_of(session_id)].definition;
        let (_, [a, b], _) = pair_parts(def, cur.pair);
        Ok(if cur.swapped { (b.1, a.1) } else { (a.1, b.1) })
    }
}
