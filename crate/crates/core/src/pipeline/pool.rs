//! Fixed-size worker pool driven by a single coordinator.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Mutex};
use std::thread;

/// Runs `work` over `jobs` on up to `workers` threads. Results are handed
/// to `handle` on the calling thread, which may resubmit a job (`Some`) or
/// stop the pool with an error. Jobs not yet started when the pool stops
/// are dropped.
pub(crate) fn run_pool<J, R, E, W, H>(jobs: Vec<J>, workers: usize, work: W, mut handle: H) -> Result<(), E>
where
    J: Send,
    R: Send,
    W: Fn(&J) -> R + Sync,
    H: FnMut(J, R) -> Result<Option<J>, E>,
{
    if jobs.is_empty() {
        return Ok(());
    }
    let workers = workers.clamp(1, jobs.len());
    let mut outstanding = jobs.len();
    let (job_tx, job_rx) = mpsc::channel::<J>();
    for j in jobs {
        job_tx.send(j).expect("receiver alive");
    }
    let job_rx = Mutex::new(job_rx);
    let (res_tx, res_rx) = mpsc::channel::<(J, R)>();
    let stop = AtomicBool::new(false);
    thread::scope(|s| {
        for _ in 0..workers {
            let res_tx = res_tx.clone();
            let (job_rx, work, stop) = (&job_rx, &work, &stop);
            s.spawn(move || loop {
                let next = job_rx.lock().unwrap().recv();
                let Ok(job) = next else { break };
                if stop.load(Ordering::SeqCst) {
                    continue;
                }
                let r = work(&job);
                if res_tx.send((job, r)).is_err() {
                    break;
                }
            });
        }
        drop(res_tx);
        let mut job_tx = Some(job_tx);
        let mut result = Ok(());
        while outstanding > 0 {
            let Ok((job, r)) = res_rx.recv() else { break };
            outstanding -= 1;
            match handle(job, r) {
                Ok(Some(again)) => {
                    outstanding += 1;
                    job_tx.as_ref().expect("open while jobs remain").send(again).expect("workers alive");
                }
                Ok(None) => {}
                Err(e) => {
                    stop.store(true, Ordering::SeqCst);
                    result = Err(e);
                    break;
                }
            }
        }
        drop(job_tx.take());
        result
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_jobs_handled_once() {
        let mut seen = Vec::new();
        run_pool::<_, _, (), _, _>((0..50).collect(), 8, |j: &i32| j * 2, |j, r| {
            assert_eq!(r, j * 2);
            seen.push(j);
            Ok(None)
        })
        .unwrap();
        seen.sort();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn resubmits_and_stops() {
        let mut tries = 0;
        run_pool::<_, _, (), _, _>(vec![1], 2, |_: &i32| (), |j, _| {
            tries += 1;
            Ok(if tries < 3 { Some(j) } else { None })
        })
        .unwrap();
        assert_eq!(tries, 3);
        let err = run_pool((0..100).collect(), 4, |j: &i32| *j, |_, r| if r == 5 { Err("stop") } else { Ok(None) });
        assert_eq!(err, Err("stop"));
    }
}
