//! Worker pool that evaluates misfit terms on isolated worker threads.
//!
//! Workers share nothing with the coordinator: terms, models and results
//! cross thread boundaries only as channel messages. Two scheduling modes are
//! offered:
//!
//! * **Dynamic**: at every misfit evaluation the coordinator keeps a queue of
//!   terms and hands the next one (with the model) to whichever worker
//!   reports idle. The realized term-to-worker map is then frozen, and the
//!   fields stay on the workers until the next evaluation, so Hessian
//!   products run where the caches are warm.
//! * **Static**: terms are shipped once, greedily balanced by estimated cost,
//!   and stay resident. Later evaluations send only the model.
//!
//! All reductions run in term-index order, so results do not depend on the
//! number of workers or on message arrival order.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{unbounded, Receiver, Sender};

use crate::error::{Error, Result};
use crate::inverse::executor::{reduce_in_order, Evaluation, Executor, RemoteRef};
use crate::inverse::misfit::{MisfitTerm, TermEval};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Dynamic,
    Static,
}

/// Batch index → worker index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMap {
    pub owner: Vec<usize>,
}

impl AssignmentMap {
    pub fn batches_of(&self, worker: usize) -> Vec<usize> {
        (0..self.owner.len()).filter(|&b| self.owner[b] == worker).collect()
    }
}

/// Byte counters of coordinator → worker traffic and of returned results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    /// Model vectors (and Hessian direction vectors) sent to workers.
    pub model_bytes: u64,
    /// Term setup (mesh, sources, receivers, data) shipped to workers.
    pub payload_bytes: u64,
    /// Values and gradients returned to the coordinator.
    pub result_bytes: u64,
    pub messages: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolOptions {
    pub n_workers: usize,
    pub mode: Mode,
    /// Per-worker limit on resident term bytes; a worker refuses terms beyond it.
    pub capacity_bytes: Option<usize>,
}

impl PoolOptions {
    pub fn new(n_workers: usize, mode: Mode) -> Self {
        Self { n_workers, mode, capacity_bytes: None }
    }
}

enum Request {
    Run { term: usize, payload: Box<MisfitTerm>, model: Arc<Vec<f64>>, want_grad: bool },
    Install { term: usize, payload: Box<MisfitTerm> },
    Evaluate { terms: Vec<usize>, model: Arc<Vec<f64>>, want_grad: bool },
    Hessian { terms: Vec<usize>, model: Arc<Vec<f64>>, v: Arc<Vec<f64>>, frozen: bool },
    Recall,
    Evict { term: usize },
    FailNext { count: usize },
    Shutdown,
}

enum Response {
    Ran { worker: usize, term: usize, result: Result<TermEval> },
    Failed { worker: usize, term: usize, payload: Box<MisfitTerm>, reason: String },
    Installed { worker: usize, term: usize, refused: Option<(Box<MisfitTerm>, String)> },
    Evaluated { result: Result<Vec<(usize, TermEval)>> },
    Hessian { result: Result<Vec<(usize, Vec<f64>, u64)>> },
    Recalled { terms: Vec<(usize, Box<MisfitTerm>)> },
}

struct Worker {
    id: usize,
    resident: BTreeMap<usize, Box<MisfitTerm>>,
    capacity: Option<usize>,
    fail_next: usize,
}

impl Worker {
    fn resident_bytes(&self) -> usize {
        self.resident.values().map(|t| t.payload_bytes()).sum()
    }

    fn take_failure(&mut self) -> bool {
        if self.fail_next > 0 {
            self.fail_next -= 1;
            true
        } else {
            false
        }
    }

    fn run(mut self, rx: Receiver<Request>, tx: Sender<Response>) {
        let id = self.id;
        for req in rx {
            let resp = match req {
                Request::Run { term, mut payload, model, want_grad } => {
                    if self.take_failure() {
                        payload.clear_cache();
                        Response::Failed { worker: id, term, payload, reason: "injected failure".into() }
                    } else {
                        let result = payload.evaluate(&model, want_grad);
                        self.resident.insert(term, payload);
                        Response::Ran { worker: id, term, result }
                    }
                }
                Request::Install { term, payload } => {
                    let need = self.resident_bytes() + payload.payload_bytes();
                    match self.capacity {
                        Some(cap) if need > cap => Response::Installed {
                            worker: id,
                            term,
                            refused: Some((payload, format!("needs {need} bytes, capacity {cap}"))),
                        },
                        _ => {
                            self.resident.insert(term, payload);
                            Response::Installed { worker: id, term, refused: None }
                        }
                    }
                }
                Request::Evaluate { terms, model, want_grad } => {
                    let result = if self.take_failure() {
                        Err(Error::WorkerFailure { worker: id, batch: terms.first().copied().unwrap_or(0), reason: "injected failure".into() })
                    } else {
                        terms
                            .iter()
                            .map(|&b| match self.resident.get_mut(&b) {
                                Some(t) => t.evaluate(&model, want_grad).map(|e| (b, e)),
                                None => Err(Error::StaleAssignment { worker: id, batch: b }),
                            })
                            .collect()
                    };
                    Response::Evaluated { result }
                }
                Request::Hessian { terms, model, v, frozen } => {
                    let result = terms
                        .iter()
                        .map(|&b| match self.resident.get(&b) {
                            Some(t) if t.is_warm(&model) => t.hessian_matvec(&model, &v).map(|h| (b, h, t.solve_count())),
                            _ if frozen => Err(Error::FrozenAssignment { worker: id, batch: b }),
                            _ => Err(Error::StaleAssignment { worker: id, batch: b }),
                        })
                        .collect();
                    Response::Hessian { result }
                }
                Request::Recall => {
                    let terms = std::mem::take(&mut self.resident).into_iter().collect();
                    Response::Recalled { terms }
                }
                Request::Evict { term } => {
                    let terms = self.resident.remove(&term).map(|t| (term, t)).into_iter().collect();
                    Response::Recalled { terms }
                }
                Request::FailNext { count } => {
                    self.fail_next = count;
                    continue;
                }
                Request::Shutdown => break,
            };
            if tx.send(resp).is_err() {
                break;
            }
        }
    }
}

/// Coordinator side of the pool.
pub struct WorkerPool {
    mode: Mode,
    n_model: usize,
    n_terms: usize,
    senders: Vec<Sender<Request>>,
    responses: Receiver<Response>,
    handles: Vec<JoinHandle<()>>,
    /// Terms currently held by the coordinator.
    home: Vec<Option<Box<MisfitTerm>>>,
    /// Static cost estimate per term.
    costs: Vec<f64>,
    assignment: Option<AssignmentMap>,
    distributed: bool,
    epoch: u64,
    traffic: Traffic,
    batch_counts: Vec<u32>,
    solves: Vec<u64>,
}

fn vec_bytes(n: usize) -> u64 {
    8 * n as u64
}

impl WorkerPool {
    pub fn new(terms: Vec<MisfitTerm>, opts: PoolOptions) -> Result<Self> {
        if opts.n_workers == 0 {
            return Err(Error::Scheduler("a pool needs at least one worker".into()));
        }
        let n_model = terms.first().map_or(0, MisfitTerm::n_model);
        if terms.iter().any(|t| t.n_model() != n_model) {
            return Err(Error::DimensionMismatch("misfit terms disagree on the model size".into()));
        }
        let (resp_tx, responses) = unbounded();
        let mut senders = Vec::with_capacity(opts.n_workers);
        let mut handles = Vec::with_capacity(opts.n_workers);
        for id in 0..opts.n_workers {
            let (tx, rx) = unbounded();
            let worker = Worker { id, resident: BTreeMap::new(), capacity: opts.capacity_bytes, fail_next: 0 };
            let out = resp_tx.clone();
            let handle = std::thread::Builder::new()
                .name(format!("worker-{id}"))
                .spawn(move || worker.run(rx, out))
                .map_err(|e| Error::Scheduler(format!("cannot spawn worker {id}: {e}")))?;
            senders.push(tx);
            handles.push(handle);
        }
        let n_terms = terms.len();
        let costs = terms
            .iter()
            .map(|t| (t.forward_problem().n_sources().max(1) * t.forward_problem().n_cells().max(1)) as f64)
            .collect();
        let solves = terms.iter().map(MisfitTerm::solve_count).collect();
        Ok(Self {
            mode: opts.mode,
            n_model,
            n_terms,
            senders,
            responses,
            handles,
            home: terms.into_iter().map(|t| Some(Box::new(t))).collect(),
            costs,
            assignment: None,
            distributed: false,
            epoch: 0,
            traffic: Traffic::default(),
            batch_counts: vec![0; n_terms],
            solves,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn n_workers(&self) -> usize {
        self.senders.len()
    }

    pub fn traffic(&self) -> Traffic {
        self.traffic
    }

    pub fn assignment(&self) -> Option<&AssignmentMap> {
        self.assignment.as_ref()
    }

    /// How many times each batch was evaluated during the last evaluation.
    pub fn batch_counts(&self) -> &[u32] {
        &self.batch_counts
    }

    /// Bytes of term data and cached fields held by the coordinator.
    pub fn coordinator_bytes(&self) -> usize {
        self.home.iter().flatten().map(|t| t.payload_bytes() + t.cache_bytes()).sum()
    }

    fn send(&mut self, worker: usize, req: Request) -> Result<()> {
        self.traffic.messages += 1;
        self.senders[worker]
            .send(req)
            .map_err(|_| Error::Scheduler(format!("worker {worker} is gone")))
    }

    fn recv(&self) -> Result<Response> {
        self.responses.recv().map_err(|_| Error::Scheduler("all workers are gone".into()))
    }

    /// Brings every resident term back to the coordinator, caches included.
    fn recall_all(&mut self) -> Result<()> {
        for w in 0..self.n_workers() {
            self.send(w, Request::Recall)?;
        }
        let mut pending = self.n_workers();
        while pending > 0 {
            if let Response::Recalled { terms } = self.recv()? {
                for (b, t) in terms {
                    self.home[b] = Some(t);
                }
                pending -= 1;
            }
        }
        self.assignment = None;
        self.distributed = false;
        Ok(())
    }

    /// Greedy assignment in batch order to the least-loaded worker (ties to
    /// the lowest index); deterministic for fixed costs.
    fn greedy_map(&self) -> AssignmentMap {
        let mut load = vec![0.0; self.n_workers()];
        let owner = self
            .costs
            .iter()
            .map(|&c| {
                let w = (0..load.len()).fold(0, |best, w| if load[w] < load[best] { w } else { best });
                load[w] += c;
                w
            })
            .collect();
        AssignmentMap { owner }
    }

    /// Ships every term to its worker once. Prepared state stays resident.
    pub fn static_distribute(&mut self) -> Result<AssignmentMap> {
        if self.mode != Mode::Static {
            return Err(Error::Scheduler("static distribution requires a static pool".into()));
        }
        if self.home.iter().any(Option::is_none) {
            self.recall_all()?;
        }
        let map = self.greedy_map();
        for b in 0..self.n_terms {
            let payload = self.home[b].take().expect("term at home");
            self.traffic.payload_bytes += payload.payload_bytes() as u64;
            self.send(map.owner[b], Request::Install { term: b, payload })?;
        }
        let mut failure = None;
        for _ in 0..self.n_terms {
            if let Response::Installed { worker, term, refused } = self.recv()? {
                if let Some((payload, reason)) = refused {
                    self.home[term] = Some(payload);
                    failure.get_or_insert(Error::Distribution { batch: term, worker, reason });
                }
            }
        }
        if let Some(e) = failure {
            self.recall_all()?;
            return Err(e);
        }
        self.distributed = true;
        self.assignment = Some(map.clone());
        Ok(map)
    }

    fn finish(&mut self, results: Vec<Option<TermEval>>, owner: Vec<usize>, want_grad: bool) -> Result<Evaluation> {
        let results: Vec<TermEval> = results
            .into_iter()
            .enumerate()
            .map(|(b, r)| r.ok_or_else(|| Error::Scheduler(format!("batch {b} produced no result"))))
            .collect::<Result<_>>()?;
        for (b, r) in results.iter().enumerate() {
            self.solves[b] = r.solves;
            self.traffic.result_bytes += 8 + r.gradient.as_ref().map_or(0, |g| vec_bytes(g.len()));
        }
        let values: Vec<f64> = results.iter().map(|r| r.value).collect();
        let (misfit, gradient) =
            reduce_in_order(self.n_model, values.iter().copied(), results.iter().map(|r| r.gradient.as_ref()))?;
        let gradient = if want_grad { Some(gradient.unwrap_or_else(|| vec![0.0; self.n_model])) } else { None };
        let refs = owner.iter().enumerate().map(|(term, &worker)| RemoteRef { worker, term, epoch: self.epoch }).collect();
        self.assignment = Some(AssignmentMap { owner });
        Ok(Evaluation { values, misfit, gradient, refs })
    }

    /// Dynamic scheduling: idle workers draw the next batch from a queue.
    pub fn dynamic_compute_misfits(&mut self, m: &[f64], want_grad: bool) -> Result<Evaluation> {
        if self.mode != Mode::Dynamic {
            return Err(Error::Scheduler("dynamic evaluation requires a dynamic pool".into()));
        }
        if self.home.iter().any(Option::is_none) {
            self.recall_all()?;
        }
        self.epoch += 1;
        self.batch_counts = vec![0; self.n_terms];
        let model = Arc::new(m.to_vec());
        let mut queue: VecDeque<usize> = (0..self.n_terms).collect();
        let mut retried = vec![false; self.n_terms];
        let mut results: Vec<Option<TermEval>> = vec![None; self.n_terms];
        let mut owner = vec![0usize; self.n_terms];
        let mut in_flight = 0usize;
        let mut error: Option<Error> = None;

        for w in 0..self.n_workers() {
            match queue.pop_front() {
                Some(b) => {
                    self.dispatch(w, b, &model, want_grad)?;
                    in_flight += 1;
                }
                None => break,
            }
        }
        while in_flight > 0 {
            let resp = self.recv()?;
            in_flight -= 1;
            let idle = match resp {
                Response::Ran { worker, term, result } => {
                    self.batch_counts[term] += 1;
                    owner[term] = worker;
                    match result {
                        Ok(r) => results[term] = Some(r),
                        Err(e) => {
                            error.get_or_insert(e);
                        }
                    }
                    worker
                }
                Response::Failed { worker, term, payload, reason } => {
                    self.home[term] = Some(payload);
                    if retried[term] {
                        error.get_or_insert(Error::WorkerFailure { worker, batch: term, reason });
                    } else {
                        retried[term] = true;
                        queue.push_back(term);
                    }
                    worker
                }
                _ => return Err(Error::Scheduler("unexpected response during dynamic evaluation".into())),
            };
            if error.is_none() {
                if let Some(b) = queue.pop_front() {
                    self.dispatch(idle, b, &model, want_grad)?;
                    in_flight += 1;
                }
            }
        }
        if let Some(e) = error {
            self.recall_all()?;
            return Err(e);
        }
        self.finish(results, owner, want_grad)
    }

    fn dispatch(&mut self, worker: usize, term: usize, model: &Arc<Vec<f64>>, want_grad: bool) -> Result<()> {
        let payload = self.home[term].take().expect("queued term is at home");
        self.traffic.payload_bytes += payload.payload_bytes() as u64;
        self.traffic.model_bytes += vec_bytes(model.len());
        self.send(worker, Request::Run { term, payload, model: Arc::clone(model), want_grad })
    }

    /// Static scheduling: only the model crosses to the workers.
    pub fn static_compute_misfits(&mut self, m: &[f64], want_grad: bool) -> Result<Evaluation> {
        if self.mode != Mode::Static {
            return Err(Error::Scheduler("static evaluation requires a static pool".into()));
        }
        if !self.distributed {
            self.static_distribute()?;
        }
        self.epoch += 1;
        self.batch_counts = vec![0; self.n_terms];
        let map = self.assignment.clone().expect("distributed pool has a map");
        let model = Arc::new(m.to_vec());
        let mut pending = 0;
        for w in 0..self.n_workers() {
            let terms = map.batches_of(w);
            if terms.is_empty() {
                continue;
            }
            self.traffic.model_bytes += vec_bytes(model.len());
            self.send(w, Request::Evaluate { terms, model: Arc::clone(&model), want_grad })?;
            pending += 1;
        }
        let mut results: Vec<Option<TermEval>> = vec![None; self.n_terms];
        let mut error = None;
        for _ in 0..pending {
            if let Response::Evaluated { result, .. } = self.recv()? {
                match result {
                    Ok(list) => {
                        for (b, r) in list {
                            self.batch_counts[b] += 1;
                            results[b] = Some(r);
                        }
                    }
                    Err(e) => {
                        error.get_or_insert(e);
                    }
                }
            }
        }
        if let Some(e) = error {
            return Err(e);
        }
        self.finish(results, map.owner, want_grad)
    }

    /// `Σ Jᵀ W J v` computed where each term's caches live. Workers return
    /// their per-term products in one message; the coordinator adds them in
    /// term order.
    pub fn distributed_hessian_matvec(&mut self, m: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let frozen = self.mode == Mode::Dynamic;
        let map = match &self.assignment {
            Some(a) => a.clone(),
            None if frozen => return Err(Error::FrozenAssignment { worker: 0, batch: 0 }),
            None => return Err(Error::StaleAssignment { worker: 0, batch: 0 }),
        };
        let model = Arc::new(m.to_vec());
        let dir = Arc::new(v.to_vec());
        let mut pending = 0;
        for w in 0..self.n_workers() {
            let terms = map.batches_of(w);
            if terms.is_empty() {
                continue;
            }
            self.traffic.model_bytes += 2 * vec_bytes(v.len());
            self.send(w, Request::Hessian { terms, model: Arc::clone(&model), v: Arc::clone(&dir), frozen })?;
            pending += 1;
        }
        let mut parts: Vec<Option<Vec<f64>>> = vec![None; self.n_terms];
        let mut error = None;
        for _ in 0..pending {
            if let Response::Hessian { result, .. } = self.recv()? {
                match result {
                    Ok(list) => {
                        for (b, h, s) in list {
                            self.solves[b] = s;
                            self.traffic.result_bytes += vec_bytes(h.len());
                            parts[b] = Some(h);
                        }
                    }
                    Err(e) => {
                        error.get_or_insert(e);
                    }
                }
            }
        }
        if let Some(e) = error {
            return Err(e);
        }
        let (_, sum) = reduce_in_order(self.n_model, std::iter::empty(), parts.iter().map(Option::as_ref))?;
        Ok(sum.unwrap_or_else(|| vec![0.0; self.n_model]))
    }

    /// Drops a resident batch from a worker, as if it lost its state.
    pub fn simulate_eviction(&mut self, worker: usize, batch: usize) -> Result<()> {
        self.send(worker, Request::Evict { term: batch })?;
        if let Response::Recalled { terms } = self.recv()? {
            for (b, mut t) in terms {
                t.clear_cache();
                self.home[b] = Some(t);
            }
        }
        Ok(())
    }

    /// Makes `worker` fail its next `count` evaluation requests.
    pub fn inject_failures(&mut self, worker: usize, count: usize) -> Result<()> {
        self.send(worker, Request::FailNext { count })
    }

    /// Stops the workers and returns the terms in batch order.
    pub fn into_terms(mut self) -> Result<Vec<MisfitTerm>> {
        self.recall_all()?;
        let home = std::mem::take(&mut self.home);
        home.into_iter()
            .enumerate()
            .map(|(b, t)| t.map(|t| *t).ok_or_else(|| Error::Scheduler(format!("batch {b} was lost"))))
            .collect()
    }
}

impl Executor for WorkerPool {
    fn n_terms(&self) -> usize {
        self.n_terms
    }

    fn n_model(&self) -> usize {
        self.n_model
    }

    fn evaluate(&mut self, m: &[f64], want_grad: bool) -> Result<Evaluation> {
        match self.mode {
            Mode::Dynamic => self.dynamic_compute_misfits(m, want_grad),
            Mode::Static => self.static_compute_misfits(m, want_grad),
        }
    }

    fn hessian_matvec(&mut self, m: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.distributed_hessian_matvec(m, v)
    }

    fn solve_count(&mut self) -> Result<u64> {
        Ok(self.solves.iter().sum())
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        for s in &self.senders {
            let _ = s.send(Request::Shutdown);
        }
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
