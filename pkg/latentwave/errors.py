"""Exception hierarchy. Each class carries the exit code `cli.main` maps it to."""


class LatentwaveError(Exception):
    exit_code = 1


class ConfigError(LatentwaveError):
    exit_code = 2


class ShapeError(LatentwaveError, ValueError):
    exit_code = 2


class AudioFormatError(LatentwaveError):
    exit_code = 2


class CheckpointError(LatentwaveError):
    exit_code = 2


class MissingDependencyError(LatentwaveError):
    exit_code = 3

    def __init__(self, artifact, stage=None):
        self.artifact = str(artifact)
        self.stage = stage
        hint = f" (run `{stage}` first)" if stage else ""
        super().__init__(f"Missing upstream artifact: {self.artifact}{hint}")


class NumericalError(LatentwaveError):
    exit_code = 4
