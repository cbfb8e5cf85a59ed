//! Strict FIFO admission with integer slots.
//!
//! The head of the queue is admitted when at least `min_sites` eligible
//! sites (online, allowed by the job, enough free slots) exist; every
//! eligible site participates. Nothing behind a waiting head is admitted.

use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteCapacity {
    pub slots: u32,
    pub used: u32,
    pub online: bool,
}

impl SiteCapacity {
    pub fn free(&self) -> u32 {
        self.slots.saturating_sub(self.used)
    }
}

/// What the scheduler needs to know about one queued job.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Demand {
    pub job_id: String,
    pub min_sites: u32,
    /// Sites the job may use, with the slots it needs on each.
    pub allowed: BTreeMap<String, u32>,
}

impl Demand {
    pub fn eligible(&self, sites: &BTreeMap<String, SiteCapacity>) -> Vec<String> {
        self.allowed
            .iter()
            .filter(|(name, need)| sites.get(*name).is_some_and(|c| c.online && c.free() >= **need))
            .map(|(name, _)| name.clone())
            .collect()
    }

    /// Sites that could take the job if they were all idle and online.
    pub fn ever_possible(&self, sites: &BTreeMap<String, SiteCapacity>) -> usize {
        self.allowed.iter().filter(|(name, need)| sites.get(*name).is_some_and(|c| c.slots >= **need)).count()
    }
}

/// Admits jobs from the front of `queue`, reserving their slots in `sites`.
/// Returns the admitted jobs with their participating sites, in order.
pub fn admit(queue: &mut Vec<Demand>, sites: &mut BTreeMap<String, SiteCapacity>) -> Vec<(String, Vec<String>)> {
    let mut admitted = Vec::new();
    while let Some(head) = queue.first() {
        let eligible = head.eligible(sites);
        if eligible.len() < head.min_sites as usize {
            break;
        }
        for s in &eligible {
            sites.get_mut(s).expect("eligible site exists").used += head.allowed[s];
        }
        let head = queue.remove(0);
        admitted.push((head.job_id, eligible));
    }
    admitted
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sites(n: u32) -> BTreeMap<String, SiteCapacity> {
        ["a", "b"].iter().map(|s| (s.to_string(), SiteCapacity { slots: n, used: 0, online: true })).collect()
    }

    fn demand(id: &str, need: u32) -> Demand {
        Demand { job_id: id.into(), min_sites: 2, allowed: [("a".into(), need), ("b".into(), need)].into() }
    }

    #[test]
    fn three_single_slot_jobs_fit_on_three_slots() {
        let mut s = sites(3);
        let mut q = vec![demand("j1", 1), demand("j2", 1), demand("j3", 1)];
        assert_eq!(admit(&mut q, &mut s).len(), 3);
        assert!(q.is_empty());
    }

    #[test]
    fn second_two_slot_job_waits() {
        let mut s = sites(3);
        let mut q = vec![demand("j1", 2), demand("j2", 2)];
        let a = admit(&mut q, &mut s);
        assert_eq!(a, vec![("j1".to_string(), vec!["a".to_string(), "b".to_string()])]);
        assert_eq!(q.len(), 1);
        for c in s.values_mut() {
            c.used -= 2;
        }
        assert_eq!(admit(&mut q, &mut s).len(), 1);
    }

    #[test]
    fn head_of_line_blocks() {
        let mut s = sites(1);
        let mut q = vec![demand("big", 2), demand("small", 1)];
        assert!(admit(&mut q, &mut s).is_empty());
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn offline_sites_are_not_eligible() {
        let mut s = sites(1);
        s.get_mut("b").unwrap().online = false;
        let mut q = vec![demand("j", 1)];
        assert!(admit(&mut q, &mut s).is_empty());
        assert_eq!(q[0].ever_possible(&s), 2);
    }
}
