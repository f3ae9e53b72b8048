use edgewbc_core::controller::Scheme;
use edgewbc_core::harness::{run_episode, ChannelSpec, EpisodeConfig, TaskChoice};
use edgewbc_core::netsim::Preset;
use proptest::prelude::*;

fn config(task: TaskChoice, scheme: Scheme, channel: ChannelSpec, seed: u64, duration: f64) -> EpisodeConfig {
    let mut cfg = EpisodeConfig::new(task, scheme);
    cfg.channel = channel;
    cfg.seed = seed;
    cfg.duration = Some(duration);
    cfg
}

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![Just(Scheme::Pr), Just(Scheme::La)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn episodes_are_deterministic(s in scheme(), seed in 0u64..1000, trace in 0u64..1000) {
        let ch = ChannelSpec::Preset { preset: Preset::BurningBuilding, seed: trace };
        let cfg = config(TaskChoice::Walking, s, ch, seed, 1.0);
        let a = run_episode(&cfg).unwrap();
        let b = run_episode(&cfg).unwrap();
        prop_assert_eq!(&a.log, &b.log);
        prop_assert_eq!(a.com_error_avg.to_bits(), b.com_error_avg.to_bits());
        prop_assert_eq!(a.violation_avg.to_bits(), b.violation_avg.to_bits());
        prop_assert_eq!(a.discrepancy_histogram, b.discrepancy_histogram);
        prop_assert_eq!(a.channel, b.channel);
    }

    #[test]
    fn averages_recompute_from_log(s in scheme(), seed in 0u64..1000, delay in 0.0f64..0.05) {
        let cfg = config(TaskChoice::Balancing, s, ChannelSpec::Constant { delay }, seed, 1.5);
        let m = run_episode(&cfg).unwrap();
        let (c, v) = m.averages_from_log();
        prop_assert_eq!(c.to_bits(), m.com_error_avg.to_bits());
        prop_assert_eq!(v.to_bits(), m.violation_avg.to_bits());
        prop_assert_eq!(m.log.len(), m.cycles);
        let binned: usize = m.discrepancy_histogram.values().sum();
        prop_assert_eq!(binned, m.log.iter().filter(|r| r.as_discrepancy.is_some()).count());
    }

    #[test]
    fn channel_messages_are_conserved(s in scheme(), trace in 0u64..1000) {
        let ch = ChannelSpec::Preset { preset: Preset::SmartFactory, seed: trace };
        let m = run_episode(&config(TaskChoice::Walking, s, ch, 0, 1.0)).unwrap();
        let c = m.channel;
        prop_assert_eq!(c.sent, c.delivered + c.dropped + c.in_flight);
        prop_assert_eq!(c.sent, m.cycles);
    }
}

/// Noise reaches the controller only: a noiseless controller input gives a
/// different command history, but the seed never changes the plant's start.
#[test]
fn noise_changes_measurements_not_initial_plant() {
    let mut quiet = config(TaskChoice::Balancing, Scheme::Pr, ChannelSpec::ideal(), 1, 0.05);
    quiet.noise_sigma = Some(0.0);
    quiet.push = None;
    let noisy = EpisodeConfig { noise_sigma: None, ..quiet.clone() };
    let a = run_episode(&quiet).unwrap();
    let b = run_episode(&noisy).unwrap();
    // Cycle 0 CoM error is measured on the true state before any torque acts.
    assert_eq!(a.log[0].com_error, b.log[0].com_error);
    assert_ne!(a.log[1].tau, b.log[1].tau);
}
