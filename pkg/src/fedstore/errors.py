"""Exception hierarchy shared by all fedstore modules."""


class FedStoreError(Exception):
    pass


# catalog

class DuplicateFederation(FedStoreError):
    pass


class CapOutOfRange(FedStoreError):
    pass


class CapTooLarge(CapOutOfRange):
    pass


class IdExhausted(FedStoreError):
    pass


class DuplicateId(FedStoreError):
    pass


class IntegrityFailure(FedStoreError):
    pass


class NotClosed(FedStoreError):
    pass


class QuiescenceRequired(FedStoreError):
    pass


class ActiveTransactions(FedStoreError):
    pass


class DanglingRef(FedStoreError):
    pass


class UnknownCollection(FedStoreError):
    pass


class UnknownDatabase(FedStoreError):
    pass


# locks

class ConnectionsExhausted(FedStoreError):
    pass


class NotConnected(FedStoreError):
    pass


class DeadTransaction(FedStoreError):
    pass


class NotActive(FedStoreError):
    pass


class ServiceDown(FedStoreError):
    pass


# storage

class NotFoundAnywhere(FedStoreError):
    pass


class MssWriteFailure(FedStoreError):
    pass


class DiskFull(FedStoreError):
    pass


# production

class UnknownKey(FedStoreError):
    pass


class NotPaused(FedStoreError):
    pass


# sweep

class CopyFailure(FedStoreError):
    """One or more entries failed to copy; the job journal stays resumable."""

    def __init__(self, job, names):
        self.job = job
        self.names = list(names)
        super().__init__(f"copy failed for {len(self.names)} entries: {', '.join(self.names)}")


class SweepBusy(FedStoreError):
    pass


# admin

class MalformedCriteria(FedStoreError):
    pass


class UnknownOperation(FedStoreError):
    pass


# harness

class ScenarioParseError(FedStoreError):
    pass


class MissingArtifacts(FedStoreError):
    pass
