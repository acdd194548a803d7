// diagnostic: what do discovered rides actually do?
use macod::config::EnvSection;
use macod::connectivity::ConnectivityHyper;
use macod::discovery::DiscoveryConfig;
use macod::env;
use macod::options::{act, advance, ActionCache, ExecutionState, JointObs};
use macod::trainer::{Mode, Selector, Trainer, TrainerHyper};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let envs = EnvSection {
        sub_setting: 1,
        room_width: 7,
        room_height: 7,
        max_steps: 200,
        ..Default::default()
    };
    let env_cfg = envs.build()?;
    let hyper = TrainerHyper { max_option_steps: 60, ..Default::default() };
    let k: f64 = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(5.0);
    let fit_steps: usize = std::env::args().nth(3).and_then(|a| a.parse().ok()).unwrap_or(10_000);
    let discovery = DiscoveryConfig {
        percentile_k: k,
        generation_interval: 150,
        max_generations: 1,
        min_buffer: 5_000,
        intra_steps: 10_000,
        intra_batch: 256,
        connectivity: ConnectivityHyper {
            steps: fit_steps,
            batch_size: 256,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut trainer = Trainer::new(env_cfg.clone(), hyper, discovery, Mode::SingleAgentOptions, seed)?;
    for _ in 0..149 {
        trainer.episode += 1;
        trainer.rollout_episode(Selector::Learned)?;
    }
    trainer.episode += 1;
    trainer.rollout_episode(Selector::Learned)?;
    let report = trainer.maybe_discover()?.expect("generation due");
    println!("groups: {:?}", report.groups);

    for slot in 1..trainer.options.capacity() {
        let Some(opt) = trainer.options.discovered(slot) else { continue };
        println!("== slot {slot} group {:?} threshold {:.4}", opt.group, opt.rule.threshold);
        // f orientation by room
        let (mut sum_a, mut n_a, mut sum_b, mut n_b) = (0.0, 0, 0.0, 0);
        for x in 0..env_cfg.grid_width {
            for y in 0..env_cfg.grid_height {
                if env_cfg.is_wall((x, y)) { continue; }
                let o = env::normalize_cell(&env_cfg, (x, y));
                let v = opt.connectivity.eval(&o);
                if x < env_cfg.wall_x { sum_a += v; n_a += 1; } else if x > env_cfg.wall_x { sum_b += v; n_b += 1; }
            }
        }
        println!("mean f room A (left) {:.3}, room B (right) {:.3}", sum_a / n_a as f64, sum_b / n_b as f64);

        // simulate 12 rides from episode start with switch pre-latched
        let agent = opt.group[0];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..12 {
            let mut state = env::reset(&env_cfg, trial)?;
            state.switch_on = true;
            let mut exec = ExecutionState::episode_start();
            exec.initiate(slot, trainer.options.generation);
            let mut cache = ActionCache::default();
            let mut path = vec![state.agent_cells[agent]];
            let mut pushes = 0;
            for _ in 0..60 {
                let joint: JointObs = env::observe(&env_cfg, &state).into_iter().map(|o| o.to_vec()).collect();
                cache.clear();
                let mut actions = vec![env::PrimitiveAction::Stay; env_cfg.n_agents()];
                actions[agent] = env::PrimitiveAction::from_index(act(
                    agent, &exec, &joint, &trainer.options, &trainer.primitive.stack,
                    &mut cache, &mut rng, false,
                ));
                let (next, _, done, ev) = env::step(&env_cfg, &state, &actions)?;
                pushes += usize::from(ev.moved[agent]);
                state = next;
                path.push(state.agent_cells[agent]);
                let next_joint: JointObs = env::observe(&env_cfg, &state).into_iter().map(|o| o.to_vec()).collect();
                if advance(&mut exec, &next_joint, &trainer.options, 60) || done {
                    break;
                }
            }
            let end = *path.last().unwrap();
            println!(
                "ride {trial}: start {:?} end {:?} len {} pushes {} box {:?}",
                path[0], end, path.len() - 1, pushes, state.box_cell
            );
        }
    }
    Ok(())
}
