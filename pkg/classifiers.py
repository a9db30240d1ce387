"""Registry of window classifier families.

A family is a class exposing static callables:
    train(dataset, train_cfg, arch_cfg, window_cfg, pre_cfg) -> (model, history)
    load(path) -> model
    save(model, path)
    predict_session(model, session) -> SessionPrediction
    param_count(arch_cfg) -> int
and a `config_cls` for its architecture section.

Register new families with @register_classifier("name").
"""

import importlib

_CLASSIFIERS: dict[str, dict] = {}

# modules that register built-in families on import
_BUILTIN_MODULES = ("model_tcn",)


def register_classifier(name: str, description: str = ""):
    """Decorator to register a named classifier family."""
    def decorator(cls):
        _CLASSIFIERS[name] = {
            "cls": cls,
            "description": description or cls.__doc__ or "",
        }
        return cls
    return decorator


def _load_builtins():
    for module in _BUILTIN_MODULES:
        importlib.import_module(module)


def get_classifier(name: str):
    """Get a classifier family by name."""
    _load_builtins()
    if name not in _CLASSIFIERS:
        available = ", ".join(sorted(_CLASSIFIERS))
        raise ValueError(f"Okänd klassificerare '{name}'. Tillgängliga: {available}")
    return _CLASSIFIERS[name]["cls"]


def list_classifiers() -> list[dict]:
    """List all registered families with name and description."""
    _load_builtins()
    return [
        {"name": name, "description": info["description"]}
        for name, info in sorted(_CLASSIFIERS.items())
    ]
