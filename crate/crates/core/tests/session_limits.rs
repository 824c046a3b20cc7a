use std::collections::HashMap;

use relay_mining::primitives::{check_collision, hash_parts, Difficulty, Identity, KeyPair, KeyRegistry, Signer};
use relay_mining::session::{
    compute_budget, new_session, Relay, RelayOutcome, RelayRequest, ServicerSession, SessionError, SessionHeader,
    SignedRequest, UnpayableReason,
};

fn pool(n: usize) -> Vec<Identity> {
    (0..n).map(|i| Identity::new(format!("servicer-{i:03}"))).collect()
}

#[test]
fn servicer_selection_is_uniform() {
    let eligible = pool(24);
    let app = Identity::new("app");
    let service = Identity::new("eth");
    let trials = 20_000u64;
    let mut counts: HashMap<Identity, u64> = HashMap::new();
    for t in 0..trials {
        let bh = hash_parts(&[b"block", &t.to_be_bytes()]);
        let h = new_session(&bh, &app, &service, &eligible, 12, t * 4, 4).unwrap();
        for s in h.servicers {
            *counts.entry(s).or_default() += 1;
        }
    }
    // Each servicer is picked with probability 1/2; sd of a count is ~71.
    let expected = trials as f64 / 2.0;
    let mut chi2 = 0.0;
    for id in &eligible {
        let c = counts[id] as f64;
        assert!((c - expected).abs() < 5.0 * (trials as f64 * 0.25).sqrt(), "{id}: {c}");
        chi2 += (c - expected).powi(2) / expected;
    }
    // Loose bound: 23 degrees of freedom, scaled by the finite-population factor.
    assert!(chi2 < 60.0, "chi2 {chi2}");
}

#[test]
fn session_errors() {
    let bh = hash_parts(&[b"b"]);
    let (a, s) = (Identity::new("a"), Identity::new("s"));
    assert_eq!(
        new_session(&bh, &a, &s, &pool(5), 12, 0, 4),
        Err(SessionError::InsufficientServicers { needed: 12, available: 5 })
    );
    let mut dup = pool(12);
    dup[3] = dup[4].clone();
    assert!(matches!(new_session(&bh, &a, &s, &dup, 12, 0, 4), Err(SessionError::DuplicateServicer(_))));
    assert!(new_session(&bh, &a, &s, &pool(12), 0, 0, 4).is_err());
}

struct Setup {
    keys: KeyRegistry,
    app: KeyPair,
    servicer: KeyPair,
    header: SessionHeader,
}

fn setup() -> Setup {
    let mut keys = KeyRegistry::new();
    let app = keys.issue(Identity::new("app"), b"k");
    let ids = pool(12);
    let mut servicer = None;
    for id in &ids {
        let k = keys.issue(id.clone(), b"k");
        servicer.get_or_insert(k);
    }
    let header = new_session(&hash_parts(&[b"g"]), app.id(), &Identity::new("eth"), &ids, 12, 0, 4).unwrap();
    Setup { keys, app, servicer: servicer.unwrap(), header }
}

impl Setup {
    fn request(&self, n: u64, height: u64) -> SignedRequest {
        RelayRequest {
            app: self.app.id().clone(),
            service: self.header.service.clone(),
            session_seed: self.header.seed,
            session_start: self.header.start_height,
            servicer: self.servicer.id().clone(),
            height,
            payload: format!("req-{n}"),
        }
        .sign(&self.app)
    }

    fn session(&self, b: u64) -> ServicerSession {
        // stake * ttrm / servicers = b with no accuracy slack.
        let budget = compute_budget(12 * b, 1, 12, 0.0).unwrap();
        assert_eq!(budget.per_servicer, b);
        ServicerSession::new(self.servicer.clone(), self.header.clone(), &budget, 256).unwrap()
    }
}

fn flood(s: &Setup, session: &mut ServicerSession, relays: u64, difficulty: &Difficulty) -> (u64, u64, u64) {
    let (mut inserted, mut missed, mut exhausted) = (0, 0, 0);
    for n in 0..relays {
        match session.handle_relay(&s.request(n, n % 4), &s.keys, difficulty) {
            RelayOutcome::ServedAndInserted { .. } => inserted += 1,
            RelayOutcome::ServedNoCollision { .. } => missed += 1,
            RelayOutcome::RejectedExhausted => exhausted += 1,
            other => panic!("unexpected {other:?}"),
        }
    }
    (inserted, missed, exhausted)
}

#[test]
fn flood_at_full_probability_inserts_exactly_b() {
    let s = setup();
    let b = 250;
    let mut session = s.session(b);
    let (inserted, missed, exhausted) = flood(&s, &mut session, 2 * b, &Difficulty::FULL);
    assert_eq!((inserted, missed, exhausted), (b, 0, b));
    assert_eq!(session.trie().root().sum, b);
    assert_eq!(session.token_count(), 0);
}

#[test]
fn flood_at_low_probability_never_exceeds_b() {
    let s = setup();
    let b = 40;
    let difficulty = Difficulty::new(0.1).unwrap();
    let mut session = s.session(b);
    let (inserted, _, _) = flood(&s, &mut session, 2 * b, &difficulty);
    assert!(inserted <= b);
    // Tokens are only spent on collisions: the count equals the colliding
    // digests seen before the bucket ran dry.
    let collisions = (0..2 * b)
        .filter(|&n| {
            let req = s.request(n, n % 4);
            let relay = Relay { response: session.respond(&req), request: req };
            check_collision(&relay.digest(), &difficulty)
        })
        .count() as u64;
    assert_eq!(inserted, collisions.min(b));
    assert_eq!(session.token_count(), b - inserted);
}

#[test]
fn payability_checks() {
    let s = setup();
    let mut session = s.session(100);
    let full = Difficulty::FULL;

    let req = s.request(1, 0);
    assert!(session.handle_relay(&req, &s.keys, &full).is_inserted());
    assert_eq!(session.handle_relay(&req, &s.keys, &full), RelayOutcome::RejectedUnpayable(UnpayableReason::Replayed));

    assert_eq!(
        session.handle_relay(&s.request(2, 4), &s.keys, &full),
        RelayOutcome::RejectedUnpayable(UnpayableReason::OutsideWindow)
    );

    let mut wrong = s.request(3, 1).request;
    wrong.servicer = Identity::new("servicer-999");
    assert_eq!(
        session.handle_relay(&wrong.sign(&s.app), &s.keys, &full),
        RelayOutcome::RejectedUnpayable(UnpayableReason::WrongServicer)
    );

    let mut foreign = s.request(4, 1).request;
    foreign.session_seed = hash_parts(&[b"elsewhere"]);
    assert_eq!(
        session.handle_relay(&foreign.sign(&s.app), &s.keys, &full),
        RelayOutcome::RejectedUnpayable(UnpayableReason::WrongSession)
    );

    let mut tampered = s.request(5, 1);
    tampered.request.payload.push('!');
    assert_eq!(session.handle_relay(&tampered, &s.keys, &full), RelayOutcome::RejectedInvalid);

    // Only the one valid relay spent a token.
    assert_eq!(session.token_count(), 99);
}

#[test]
fn responses_are_signed_by_the_servicer() {
    let s = setup();
    let session = s.session(1);
    let req = s.request(0, 0);
    let resp = session.respond(&req);
    assert!(resp.verify(&s.keys));
    assert_eq!(resp.response.servicer, *s.servicer.id());
    assert_eq!(resp, session.respond(&req));
}
