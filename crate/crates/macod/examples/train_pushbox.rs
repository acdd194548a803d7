//! Short training demonstration on the two-agent sub-setting: flat
//! baseline episodes, one option generation, then hierarchical training.
//! Prints a progress row every 25 episodes.

use macod::config::EnvSection;
use macod::connectivity::ConnectivityHyper;
use macod::discovery::DiscoveryConfig;
use macod::trainer::{Mode, Trainer, TrainerHyper};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let episodes: u64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(400);
    let mode = match args.get(2).map(String::as_str) {
        Some("no_options") => Mode::NoOptions,
        Some("multi_agent_options") => Mode::MultiAgentOptions,
        _ => Mode::SingleAgentOptions,
    };
    let seed: u64 = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(0);

    let env = EnvSection {
        sub_setting: 1,
        room_width: 7,
        room_height: 7,
        max_steps: 200,
        ..Default::default()
    }
    .build()?;
    let alpha: f64 = args.get(5).and_then(|a| a.parse().ok()).unwrap_or(0.05);
    let cap: usize = args.get(6).and_then(|a| a.parse().ok()).unwrap_or(25);
    let hyper = TrainerHyper {
        alpha,
        max_option_steps: cap,
        ..Default::default()
    };
    let generations: u32 = args.get(4).and_then(|a| a.parse().ok()).unwrap_or(1);
    let discovery = DiscoveryConfig {
        percentile_k: 2.0,
        generation_interval: 150,
        max_generations: generations,
        min_buffer: 5_000,
        intra_steps: 10_000,
        intra_batch: 256,
        connectivity: ConnectivityHyper {
            steps: 10_000,
            batch_size: 256,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut trainer = Trainer::new(env, hyper, discovery, mode, seed)?;
    println!("mode {mode}, seed {seed}, {episodes} episodes");
    println!(
        "{:>8} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8}",
        "episode", "ret0", "ret1", "switch", "moves", "target", "sec/ep"
    );
    let mut window = (vec![0.0f64; 2], 0usize, 0usize, 0usize);
    let started = std::time::Instant::now();
    let mut last = started;
    for _ in 0..episodes {
        let (rec, report) = trainer.train_episode()?;
        window.0[0] += rec.returns[0];
        window.0[1] += rec.returns[1];
        window.1 += rec.switch_events;
        window.2 += rec.box_moves;
        window.3 += usize::from(rec.target_event);
        if let Some(report) = report {
            println!("-- generation {} groups {:?}", trainer.options.generation, report.groups);
            for g in &report.per_group {
                println!(
                    "   group {:?}: threshold {:.4}, termination fraction {:.3}, fit loss {:.4} -> {:.4}",
                    g.group,
                    g.threshold,
                    g.termination_fraction,
                    g.fit.as_ref().map(|f| f.initial_loss).unwrap_or(f64::NAN),
                    g.fit.as_ref().map(|f| f.final_loss).unwrap_or(f64::NAN),
                );
            }
        }
        if rec.episode % 25 == 0 {
            let usage: Vec<usize> = (0..trainer.options.capacity())
                .map(|s| rec.option_usage.iter().map(|u| u[s]).sum())
                .collect();
            print!("usage {usage:?} ");
            let dt = last.elapsed().as_secs_f64() / 25.0;
            last = std::time::Instant::now();
            println!(
                "{:>8} {:>10.3} {:>10.3} {:>8} {:>8} {:>8} {:>8.2}",
                rec.episode,
                window.0[0] / 25.0,
                window.0[1] / 25.0,
                window.1,
                window.2,
                window.3,
                dt
            );
            window = (vec![0.0; 2], 0, 0, 0);
        }
    }
    println!("total {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
