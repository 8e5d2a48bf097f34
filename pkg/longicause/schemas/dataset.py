from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict, Field


class DatasetMeta(BaseModel):
    """Content of the `<name>.meta.json` sidecar."""
    model_config = ConfigDict(extra="allow")

    n: int = Field(ge=0)
    T: int = Field(ge=1)
    d_x: int = Field(ge=1)
    d_u: int = Field(default=0, ge=0)
    generator: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    cluster_observed: bool = True
