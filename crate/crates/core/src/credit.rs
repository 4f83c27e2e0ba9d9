//! Credit links between gates.
//!
//! A link couples a downstream gate to an upstream gate. The upstream gate
//! must take one credit to open a batch; the downstream gate hands the
//! credit back when it closes that batch. With `initial` credits at most
//! `initial` batches are in flight between the two gates.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};

use crate::error::CreditError;
use crate::gate::{Gate, GateScope};
use crate::trace::{Event, EventKind, Tracer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkScope {
    Local,
    Global,
}

/// Something that wants to hear about returned credits.
pub trait CreditListener: Send + Sync {
    fn on_credit(&self);
}

/// Where a downstream gate sends credits when it closes a batch.
pub trait CreditSink: Send + Sync {
    fn release(&self, batch_id: u64);
}

pub struct CreditLink {
    id: u32,
    name: String,
    scope: LinkScope,
    initial: u64,
    credits: AtomicU64,
    listener: Mutex<Option<Weak<dyn CreditListener>>>,
    tracer: Tracer,
}

impl fmt::Debug for CreditLink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CreditLink")
            .field("id", &self.id)
            .field("name", &self.name)
            .field("scope", &self.scope)
            .field("initial", &self.initial)
            .field("credits", &self.credits())
            .finish()
    }
}

impl CreditLink {
    /// A detached link; [`create_link`] is the usual way to build one.
    pub fn new(
        id: u32,
        name: impl Into<String>,
        initial: u64,
        scope: LinkScope,
        tracer: Tracer,
    ) -> Result<Arc<Self>, CreditError> {
        let name = name.into();
        if initial == 0 {
            return Err(CreditError::DeadlockRisk(name));
        }
        Ok(Arc::new(Self {
            id,
            name,
            scope,
            initial,
            credits: AtomicU64::new(initial),
            listener: Mutex::new(None),
            tracer,
        }))
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn scope(&self) -> LinkScope {
        self.scope
    }

    pub fn initial(&self) -> u64 {
        self.initial
    }

    pub fn credits(&self) -> u64 {
        self.credits.load(Ordering::SeqCst)
    }

    /// Credits currently held by open batches.
    pub fn outstanding(&self) -> u64 {
        self.initial - self.credits()
    }

    pub fn set_listener(&self, listener: Weak<dyn CreditListener>) {
        *self.listener.lock().unwrap() = Some(listener);
    }

    /// Takes one credit if any is available.
    pub fn acquire(&self, batch_id: u64) -> bool {
        let taken = self
            .credits
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| c.checked_sub(1))
            .is_ok();
        if taken {
            // Stamped after the decrement so a reuse never precedes its release.
            self.tracer.record(
                Event::new(EventKind::CreditAcquire, batch_id).arity(self.initial),
            );
        }
        taken
    }

    /// Returns one credit and wakes the upstream gate.
    pub fn release(&self, batch_id: u64) -> Result<(), CreditError> {
        let initial = self.initial;
        // Stamped before the increment, see `acquire`.
        self.tracer
            .record(Event::new(EventKind::CreditRelease, batch_id).arity(initial));
        self.credits
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| {
                (c < initial).then_some(c + 1)
            })
            .map_err(|_| CreditError::AccountingError {
                link: self.name.clone(),
                initial,
            })?;
        let listener = self.listener.lock().unwrap().as_ref().and_then(Weak::upgrade);
        if let Some(listener) = listener {
            listener.on_credit();
        }
        Ok(())
    }
}

impl CreditSink for CreditLink {
    fn release(&self, batch_id: u64) {
        if let Err(e) = CreditLink::release(self, batch_id) {
            log::error!("{e}");
        }
    }
}

/// Registers a link bounding `upstream` by batches closed at `downstream`.
pub fn create_link(
    id: u32,
    upstream: &Arc<Gate>,
    downstream: &Arc<Gate>,
    initial: u64,
    scope: LinkScope,
    tracer: Tracer,
) -> Result<Arc<CreditLink>, CreditError> {
    let name = format!("{}->{}", downstream.name(), upstream.name());
    check_scope(&name, scope, upstream.scope(), downstream.scope())?;
    let link = CreditLink::new(id, name, initial, scope, tracer)?;
    upstream.add_credit_source(link.clone());
    downstream.add_credit_sink(link.clone());
    Ok(link)
}

pub(crate) fn check_scope(
    name: &str,
    scope: LinkScope,
    upstream: &GateScope,
    downstream: &GateScope,
) -> Result<(), CreditError> {
    let ok = match (scope, upstream, downstream) {
        (LinkScope::Global, GateScope::Global, GateScope::Global) => true,
        (LinkScope::Local, GateScope::Local(a), GateScope::Local(b)) => a == b,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(CreditError::ScopeError {
            link: name.to_owned(),
            detail: format!("{scope:?} link between {upstream} and {downstream}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn link(initial: u64) -> Arc<CreditLink> {
        CreditLink::new(0, "l", initial, LinkScope::Global, Tracer::disabled()).unwrap()
    }

    #[test]
    fn zero_initial_is_rejected() {
        assert!(matches!(
            CreditLink::new(0, "l", 0, LinkScope::Local, Tracer::disabled()),
            Err(CreditError::DeadlockRisk(_))
        ));
    }

    #[test]
    fn acquire_and_release() {
        let l = link(2);
        assert!(l.acquire(1));
        assert_eq!(l.credits(), 1);
        assert!(l.acquire(2));
        assert!(!l.acquire(3));
        l.release(1).unwrap();
        assert_eq!(l.credits(), 1);
        l.release(2).unwrap();
        assert!(matches!(l.release(3), Err(CreditError::AccountingError { .. })));
        assert_eq!(l.credits(), 2);
    }

    #[test]
    fn at_most_initial_acquisitions_before_release() {
        let l = link(3);
        let granted = (0..10).filter(|&b| l.acquire(b)).count();
        assert_eq!(granted, 3);
    }

    #[test]
    fn scope_rules() {
        let local_a = GateScope::Local("a".into());
        let local_b = GateScope::Local("b".into());
        assert!(check_scope("x", LinkScope::Local, &local_a, &local_a).is_ok());
        assert!(check_scope("x", LinkScope::Local, &local_a, &local_b).is_err());
        assert!(check_scope("x", LinkScope::Global, &local_a, &GateScope::Global).is_err());
        assert!(check_scope("x", LinkScope::Global, &GateScope::Global, &GateScope::Global).is_ok());
    }

    proptest! {
        // acquires - releases never exceeds initial and credits are conserved.
        #[test]
        fn conservation_under_random_schedules(initial in 1u64..8, ops in proptest::collection::vec(any::<bool>(), 0..200)) {
            let l = link(initial);
            let mut held = 0u64;
            for acquire in ops {
                if acquire {
                    if l.acquire(0) { held += 1; }
                } else if held > 0 {
                    l.release(0).unwrap();
                    held -= 1;
                }
                prop_assert!(held <= initial);
                prop_assert_eq!(l.credits() + held, initial);
            }
        }
    }
}
