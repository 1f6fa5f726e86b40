"""AmbiFlow 전체에서 공유하는 예외 계층"""


class AmbiFlowError(Exception):
    """모든 AmbiFlow 예외의 기반 클래스"""


class UsageError(AmbiFlowError):
    """명령행 인자 오류"""


class ConfigurationError(AmbiFlowError):
    """설정 또는 파라미터 형태 오류"""


class TapeConsumedError(AmbiFlowError):
    """이미 역전파가 끝난 테이프를 다시 사용한 경우"""


class GradCheckError(AmbiFlowError):
    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class FlowError(AmbiFlowError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class RotationError(AmbiFlowError):
    """6D 회전 시드가 퇴화된 경우"""


class ProjectionError(AmbiFlowError):
    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = [] if indices is None else list(indices)


class DegenerateHeatmapError(AmbiFlowError):
    """0.05 이상의 셀이 하나도 없는 히트맵"""


class EmptyMaskError(AmbiFlowError):
    """픽셀이 하나도 없는 마스크"""


class SampleCountError(AmbiFlowError):
    """MMD 계산에 필요한 샘플 수가 부족한 경우"""


class TrainingDivergedError(AmbiFlowError):
    def __init__(self, message, iteration=None, terms=None):
        super().__init__(message)
        self.iteration = iteration
        self.terms = {} if terms is None else dict(terms)


class CheckpointError(AmbiFlowError):
    """체크포인트 파일 형식 오류"""


class DatasetError(AmbiFlowError):
    """데이터셋 파일 형식 오류"""
