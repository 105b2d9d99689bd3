use std::thread;

use fedsaf_core::fed::{ClientExecutor, ClientJob, ClientRoundOutput};
use fedsaf_core::Result;

/// Spreads a round's client jobs over a fixed number of scoped threads.
///
/// Each job carries its own seed, so the outputs (returned in job order) are
/// identical to [`fedsaf_core::fed::Sequential`] for any thread count.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    pub threads: usize,
}

impl ClientExecutor for Threaded {
    fn execute(&self, jobs: Vec<ClientJob<'_>>) -> Vec<Result<ClientRoundOutput>> {
        let workers = self.threads.clamp(1, jobs.len().max(1));
        if workers == 1 {
            return jobs.into_iter().map(ClientJob::run).collect();
        }
        let mut buckets: Vec<Vec<(usize, ClientJob<'_>)>> = (0..workers).map(|_| Vec::new()).collect();
        let total = jobs.len();
        for (k, job) in jobs.into_iter().enumerate() {
            buckets[k % workers].push((k, job));
        }
        let mut results: Vec<Option<Result<ClientRoundOutput>>> = (0..total).map(|_| None).collect();
        thread::scope(|s| {
            let handles: Vec<_> = buckets
                .into_iter()
                .map(|bucket| s.spawn(move || bucket.into_iter().map(|(k, job)| (k, job.run())).collect::<Vec<_>>()))
                .collect();
            for h in handles {
                for (k, out) in h.join().expect("client worker panicked") {
                    results[k] = Some(out);
                }
            }
        });
        results.into_iter().map(|r| r.expect("every job produced an output")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedsaf_core::data::{generate_mixture, partition_dirichlet, MixtureParams};
    use fedsaf_core::fed::{run_experiment_with, ExperimentPlan, RoundConfig, Scenario, Sequential};
    use fedsaf_core::model::htfe4;

    #[test]
    fn thread_count_does_not_change_results() {
        let ds = generate_mixture(&MixtureParams { samples_per_class: 30, ..MixtureParams::default() }).unwrap();
        let shards = partition_dirichlet(&ds, 0.5, 5, 2).unwrap();
        let plan = ExperimentPlan {
            round: RoundConfig { participation_fraction: 0.8, ..RoundConfig::default() },
            archs: htfe4(6),
            rounds: 3,
            seed: 4,
            scenario: Scenario::Hetero,
            num_classes: 10,
            normalize_stacked: false,
        };
        let seq = run_experiment_with(&plan, &shards, &Sequential, |_, _| {}).unwrap();
        let par = run_experiment_with(&plan, &shards, &Threaded { threads: 3 }, |_, _| {}).unwrap();
        assert_eq!(seq.reports, par.reports);
        assert_eq!(seq.models, par.models);
    }
}
