//! Fills a replay buffer with random Pendulum-P episodes and samples a padded batch.

use gruode::envs::{EnvSpec, PomdpEnv};
use gruode::replay::ReplayBuffer;
use gruode::trace::Episode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gruode::Result<()> {
    let spec = EnvSpec::pendulum_p();
    let mut env = PomdpEnv::new(spec, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut buffer = ReplayBuffer::new(1_000);
    // Capacity 1000 keeps only the newest five 200-step episodes.
    for _ in 0..8 {
        let mut step = env.reset();
        let mut episode = Episode::start(&step, spec.action_dim());
        while !step.episode_over() {
            let a = [rng.random_range(-1.0..=1.0)];
            step = env.step(&a)?;
            episode.record(&a, &step)?;
        }
        buffer.push_episode(episode)?;
    }
    println!(
        "{} episodes, {} transitions",
        buffer.num_episodes(),
        buffer.transitions()
    );
    let batch = buffer.sample_batch(&mut rng, 8, 64)?;
    for o in &batch.origins {
        println!(
            "episode {:>2} start {:>3} valid {:>2} padded {:>2}",
            o.episode_id,
            o.start,
            o.valid,
            batch.seq_len() - o.valid
        );
    }
    println!("{} of {} steps unmasked", batch.valid_steps(), 8 * 64);
    Ok(())
}
