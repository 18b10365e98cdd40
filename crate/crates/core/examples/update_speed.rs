//! Times agent updates at the default batch shape (64 sequences × 64 steps).

use std::time::Instant;

use gruode::agents::{ActMode, Agent, AgentConfig, AgentKind};
use gruode::envs::{EnvSpec, PomdpEnv};
use gruode::replay::{ReplayBuffer, DEFAULT_BATCH_SIZE, DEFAULT_SEQ_LEN};
use gruode::trace::Episode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gruode::Result<()> {
    let spec = EnvSpec::pendulum_p();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in [AgentKind::Td3, AgentKind::Sac] {
        let config = AgentConfig {
            kind,
            ..AgentConfig::default()
        };
        let mut agent = Agent::new(config, spec.obs_dim(), spec.action_dim(), 0)?;
        let mut env = PomdpEnv::new(spec, 0);
        let mut buffer = ReplayBuffer::default();
        let start = Instant::now();
        for _ in 0..5 {
            let mut step = env.reset();
            let mut state = agent.start_episode();
            let mut episode = Episode::start(&step, spec.action_dim());
            while !step.episode_over() {
                let out = agent.act(&mut state, &step, ActMode::Explore, &mut rng)?;
                step = env.step(&out.action)?;
                episode.record(&out.action, &step)?;
            }
            buffer.push_episode(episode)?;
        }
        let per_step = start.elapsed().as_secs_f64() / 1000.0;
        println!("{kind}: {:.1} µs per environment step", per_step * 1e6);
        let n = 6;
        let start = Instant::now();
        for _ in 0..n {
            let batch = buffer.sample_batch(&mut rng, DEFAULT_BATCH_SIZE, DEFAULT_SEQ_LEN)?;
            agent.update(&batch)?;
        }
        let per = start.elapsed().as_secs_f64() / n as f64;
        println!("{kind}: {per:.3} s per update");
    }
    Ok(())
}
