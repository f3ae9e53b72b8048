use edgewbc_core::netsim::{generate_trace, Channel, ChannelModel, Delivery, Direction, Inbox, Link, Message, Preset, Trace};
use proptest::prelude::*;

fn preset() -> impl Strategy<Value = Preset> {
    prop_oneof![Just(Preset::SmartFactory), Just(Preset::BurningBuilding)]
}

fn delays(model: ChannelModel, n: usize) -> Vec<Option<f64>> {
    let mut ch = Channel::new(model).unwrap();
    (0..n).map(|i| ch.slot(i as f64 * 1e-3).round_trip()).collect()
}

#[test]
fn constant_delivers_exactly_after_delay() {
    let mut ch = Channel::new(ChannelModel::Constant { delay: 0.01 }).unwrap();
    let mut link: Link<u32> = Link::new(Direction::Downlink);
    assert_eq!(link.send(&mut ch, 0.5, 0.5, 10, 7), Delivery::At(0.51));
    assert!(link.poll(0.509).is_empty());
    assert_eq!(link.poll(0.51)[0].payload, 7);
}

#[test]
fn empty_inbox_yields_nothing() {
    let mut inbox: Inbox<()> = Inbox::default();
    assert!(inbox.receive(1.0, 8e-4).is_none());
}

#[test]
fn stale_delivery_is_counted_late() {
    let msg = |ts: f64| Message { direction: Direction::Downlink, send_time: ts, state_timestamp: ts, payload_bytes: 0, payload: () };
    let mut inbox = Inbox::default();
    inbox.push(msg(1.0 - 0.3e-3));
    inbox.push(msg(1.0 - 1.4e-3));
    let got = inbox.receive(1.0, 0.8e-3).unwrap();
    assert!((got.state_timestamp - (1.0 - 0.3e-3)).abs() < 1e-15);
    assert_eq!(inbox.stats.late, 1);
}

#[test]
fn preset_caps_and_tails() {
    let mut factory_tail = 0usize;
    for seed in 0..100 {
        let f = generate_trace(Preset::SmartFactory, 10.0, seed).unwrap();
        let b = generate_trace(Preset::BurningBuilding, 10.0, seed).unwrap();
        for d in f.delays.iter().flatten() {
            assert!(*d <= 0.389 + 6e-3);
            factory_tail += (*d > 0.091 + 6e-3) as usize;
        }
        for d in b.delays.iter().flatten() {
            assert!(*d <= 0.091 + 6e-3);
        }
    }
    assert!(factory_tail > 0);
}

#[test]
fn building_blocks_more_often() {
    let count = |p: Preset| {
        let mut ch = Channel::new(ChannelModel::Blockage(p.params(3))).unwrap();
        ch.outages_until(100.0).len()
    };
    assert!(count(Preset::BurningBuilding) > count(Preset::SmartFactory));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blockage_is_deterministic(p in preset(), seed in any::<u64>()) {
        let a = delays(ChannelModel::Blockage(p.params(seed)), 3000);
        let b = delays(ChannelModel::Blockage(p.params(seed)), 3000);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn round_trip_never_below_floor(p in preset(), seed in any::<u64>()) {
        for d in delays(ChannelModel::Blockage(p.params(seed)), 3000).into_iter().flatten() {
            prop_assert!((4e-3 - 1e-12..).contains(&d));
        }
    }

    #[test]
    fn trace_replays_bit_exact(p in preset(), seed in any::<u64>()) {
        let trace = generate_trace(p, 2.0, seed).unwrap();
        let mut csv = Vec::new();
        trace.write_csv(&mut csv).unwrap();
        let back = Trace::read_csv(csv.as_slice()).unwrap();
        prop_assert_eq!(&back, &trace);
        let replay = delays(ChannelModel::Trace(back), trace.len());
        let live = delays(ChannelModel::Blockage(p.params(seed)), trace.len());
        prop_assert_eq!(replay, live);
        let mut again = Vec::new();
        generate_trace(p, 2.0, seed).unwrap().write_csv(&mut again).unwrap();
        prop_assert_eq!(csv, again);
    }

    #[test]
    fn messages_are_conserved(p in preset(), seed in any::<u64>(), stop in 100usize..3000) {
        let mut ch = Channel::new(ChannelModel::Blockage(p.params(seed))).unwrap();
        let mut link: Link<usize> = Link::new(Direction::Downlink);
        let mut received = 0;
        for i in 0..stop {
            let t = i as f64 * 1e-3;
            if let Delivery::At(at) = link.send(&mut ch, t, t, 100, i) {
                prop_assert!(at >= t);
            }
            received += link.poll(t).len();
        }
        let s = link.stats;
        prop_assert_eq!(s.sent, s.delivered + s.dropped + link.in_flight());
        prop_assert_eq!(received, s.delivered);
    }

    /// The inbox picks what a sort by state timestamp would pick.
    #[test]
    fn inbox_matches_sorted_oracle(ages in proptest::collection::vec(0.0f64..3e-3, 0..12), deadline in 1e-4f64..2e-3) {
        let now = 1.0;
        let mut inbox = Inbox::default();
        for (i, a) in ages.iter().enumerate() {
            inbox.push(Message { direction: Direction::Downlink, send_time: now - a, state_timestamp: now - a, payload_bytes: 0, payload: i });
        }
        let got = inbox.receive(now, deadline).map(|m| m.state_timestamp);
        let mut fresh: Vec<f64> = ages.iter().filter(|a| now - (now - **a) < deadline).map(|a| now - a).collect();
        fresh.sort_by(f64::total_cmp);
        prop_assert_eq!(got, fresh.last().copied());
        prop_assert_eq!(inbox.stats.late, ages.len() - fresh.len());
    }
}
