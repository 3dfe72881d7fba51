use crate::error::{invalid, Error, Result};

use super::{FastPath, FrameResult, FrameSource, Pipeline};

/// Refresh at frame 0 and every `n`-th frame: entry `t` names the source frame
/// of a refresh adopted before frame `t`.
pub fn sync_schedule(len: usize, n: usize) -> Vec<Option<usize>> {
    (0..len).map(|t| (t % n == 0).then_some(t)).collect()
}

/// Refresh schedule recorded in a run's results.
pub fn refresh_schedule(results: &[FrameResult]) -> Vec<Option<usize>> {
    results.iter().map(|r| r.refreshed_from).collect()
}

/// Runs the fast path over the whole source, adopting the scheduled refreshes
/// from each source frame's foundation features. Single-threaded and deterministic.
pub fn run_schedule(pipeline: &Pipeline, source: &dyn FrameSource, schedule: &[Option<usize>]) -> Result<Vec<FrameResult>> {
    if source.is_empty() {
        return Err(invalid("empty sequence"));
    }
    if schedule.len() != source.len() {
        return Err(invalid(format!("schedule covers {} frames, sequence has {}", schedule.len(), source.len())));
    }
    let mut fast = FastPath::new(pipeline.clone());
    let mut version = 0;
    let mut results = Vec::with_capacity(source.len());
    for (t, refresh) in schedule.iter().enumerate() {
        let frame = source.frame(t)?;
        if let Some(s) = *refresh {
            if s > t {
                return Err(Error::State(format!("frame {t} cannot adopt a refresh from future frame {s}")));
            }
            let src = source.frame(s)?;
            version += 1;
            fast.adopt(src.foundation.clone(), &src, version)?;
        }
        let mut r = fast.step(&frame)?;
        r.refreshed_from = *refresh;
        results.push(r);
    }
    Ok(results)
}

/// Fixed-interval replay: refresh on every `n`-th frame, starting at frame 0.
pub fn run_sync(pipeline: &Pipeline, source: &dyn FrameSource, n: usize) -> Result<Vec<FrameResult>> {
    if n == 0 {
        return Err(invalid("refresh interval N must be at least 1"));
    }
    run_schedule(pipeline, source, &sync_schedule(source.len(), n))
}
