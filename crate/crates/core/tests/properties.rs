use std::thread;

use proptest::prelude::*;

use conc_compose::{go_spawn, Agent, Atom, Channel, Mode, Promise, Ref, Runtime};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn concurrent_swaps_sum(incs in prop::collection::vec(1i64..100, 1..200)) {
        let rt = Runtime::new(Mode::Faithful);
        let a = Atom::new(&rt, 0i64);
        let (left, right) = incs.split_at(incs.len() / 2);
        let spawn = |part: Vec<i64>| {
            let a = a.clone();
            thread::spawn(move || for x in part { a.swap(|v| Ok(v + x)).unwrap(); })
        };
        let hs = [spawn(left.to_vec()), spawn(right.to_vec())];
        for h in hs { h.join().unwrap(); }
        prop_assert_eq!(a.deref(), incs.iter().sum::<i64>());
    }

    #[test]
    fn first_delivery_wins(values in prop::collection::vec(any::<i32>(), 1..20)) {
        let rt = Runtime::new(Mode::Faithful);
        let p = Promise::new(&rt);
        let results: Vec<bool> = values.iter().map(|v| p.deliver(*v)).collect();
        prop_assert!(results[0]);
        prop_assert!(results[1..].iter().all(|r| !r));
        prop_assert_eq!(p.deref(), Ok(values[0]));
    }

    #[test]
    fn channel_preserves_single_producer_order(values in prop::collection::vec(any::<u16>(), 0..100)) {
        let rt = Runtime::new(Mode::Faithful);
        let c = Channel::new(&rt);
        let producer = {
            let (c, values) = (c.clone(), values.clone());
            go_spawn(&rt, move || { for v in values { c.put(v, None)?; } Ok(()) })
        };
        let got: Vec<u16> = (0..values.len()).map(|_| c.take(None).unwrap()).collect();
        prop_assert_eq!(producer.take(None), Ok(()));
        prop_assert_eq!(got, values);
        rt.shutdown();
    }

    #[test]
    fn transfers_preserve_total(moves in prop::collection::vec((0usize..3, 0usize..3, 1i64..50), 1..60)) {
        let rt = Runtime::new(Mode::Faithful);
        let accounts: Vec<Ref<i64>> = (0..3).map(|_| Ref::new(&rt, 1000)).collect();
        let (left, right) = moves.split_at(moves.len() / 2);
        let spawn = |part: Vec<(usize, usize, i64)>| {
            let (rt, accounts) = (rt.clone(), accounts.clone());
            thread::spawn(move || for (from, to, x) in part {
                rt.transaction(|| {
                    accounts[from].alter(|v| Ok(v - x))?;
                    accounts[to].alter(|v| Ok(v + x))
                }).unwrap();
            })
        };
        let hs = [spawn(left.to_vec()), spawn(right.to_vec())];
        for h in hs { h.join().unwrap(); }
        prop_assert_eq!(accounts.iter().map(|a| a.committed()).sum::<i64>(), 3000);
    }

    #[test]
    fn agent_state_is_the_fold_of_its_actions(xs in prop::collection::vec(-50i64..50, 0..100)) {
        let rt = Runtime::new(Mode::Faithful);
        let ag = Agent::new(&rt, 0i64);
        for x in xs.clone() {
            ag.send(move |s| Ok(s * 3 % 1_000_003 + x)).unwrap();
        }
        ag.await_for(None).unwrap();
        let want = xs.iter().fold(0i64, |s, x| s * 3 % 1_000_003 + x);
        prop_assert_eq!(ag.deref(), want);
        rt.shutdown();
    }
}
