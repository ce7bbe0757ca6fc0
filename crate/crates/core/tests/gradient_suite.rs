use ccf_core::models::{Gradient, HistoryInput, Model, ModelType, ScoreRequest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn relative_error(model: &mut Model, user: usize, history: &[usize], item: usize) -> f64 {
    let req = ScoreRequest {
        user,
        history: HistoryInput::Items(history),
        item,
    };
    let mut g = Gradient::new(model.dim());
    model.grad(&req, 1.0, &mut g).unwrap();
    let analytic = g.to_dense(model);
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let orig = *model.param_mut(i);
        *model.param_mut(i) = orig + STEP;
        let up = model.score(&req).unwrap();
        *model.param_mut(i) = orig - STEP;
        let down = model.score(&req).unwrap();
        *model.param_mut(i) = orig;
        let numeric = (up - down) / (2.0 * STEP);
        diff += (a - numeric).powi(2);
        norm += a * a + numeric * numeric;
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

fn random_case(model_type: ModelType, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = rng.random_range(1..5);
    let items = rng.random_range(2..12);
    let dim = rng.random_range(1..9);
    let mut m = Model::new(model_type, users, items, dim, seed).unwrap();
    let scale: f64 = rng.random_range(0.5..8.0);
    for i in 0..(users + items) * dim {
        *m.param_mut(i) *= scale;
    }
    for b in m.item_bias.iter_mut().chain(m.user_bias.iter_mut()) {
        *b = rng.random_range(-1.0..1.0);
    }
    m.global_bias = rng.random_range(-1.0..1.0);
    let len = rng.random_range(0..=10);
    let history: Vec<usize> = (0..len).map(|_| rng.random_range(0..items)).collect();
    let user = rng.random_range(0..users);
    let item = rng.random_range(0..items);
    relative_error(&mut m, user, &history, item)
}

#[test]
fn mf_hundred_seeded_checks() {
    for seed in 0..100 {
        let err = random_case(ModelType::Mf, seed);
        assert!(err < TOLERANCE, "seed {seed}: relative error {err}");
    }
}

#[test]
fn attnseq_hundred_seeded_checks() {
    for seed in 0..100 {
        let err = random_case(ModelType::AttnSeq, seed);
        assert!(err < TOLERANCE, "seed {seed}: relative error {err}");
    }
}
