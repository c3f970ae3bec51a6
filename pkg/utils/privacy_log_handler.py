"""
Log filter that keeps credentials out of log output.

Covers provider API keys (sk- style keys, bearer tokens, *_API_KEY
assignments) and environment credentials that show up in rendered actions
(password arguments of login calls).
"""
import logging
import re
from typing import Dict, Optional, Pattern, Tuple, Union

DEFAULT_PATTERNS: Dict[str, Tuple[Pattern, str]] = {
    'sk_api_keys': (re.compile(r'sk-[a-zA-Z0-9_\-]{16,}'), '[API KEY REDACTED]'),
    'bearer_token': (re.compile(r'(bearer\s+)[a-zA-Z0-9_\-\.]{16,}', re.I), r'\1[TOKEN REDACTED]'),
    'env_var_api_key': (re.compile(r'(\w+_API_KEY\s*[=:]\s*["\']?)[^\s"\']+'), r'\1[API KEY REDACTED]'),
    'password_arg': (re.compile(r'(password\s*=\s*)(["\'])(.*?)\2', re.I), r'\1\2[PASSWORD REDACTED]\2'),
}


class PrivacyLogFilter(logging.Filter):
    """Filter that removes sensitive information from log records"""

    def __init__(self, patterns: Optional[Dict[str, Tuple[Pattern, str]]] = None, name: str = ''):
        super().__init__(name)
        self.patterns = patterns or DEFAULT_PATTERNS

    def sanitize(self, text: str) -> str:
        for pattern, replacement in self.patterns.values():
            text = pattern.sub(replacement, text)
        return text

    def filter(self, record: logging.LogRecord) -> bool:
        try:
            if isinstance(record.msg, str):
                record.msg = self.sanitize(record.msg)
            if isinstance(record.args, dict):
                record.args = {
                    key: self.sanitize(value) if isinstance(value, str) else value
                    for key, value in record.args.items()
                }
            elif isinstance(record.args, tuple):
                record.args = tuple(self.sanitize(arg) if isinstance(arg, str) else arg for arg in record.args)
        except Exception:
            # Never block a log record because the filter misbehaved
            pass
        return True


def add_privacy_filter_to_logger(logger: Optional[Union[str, logging.Logger]] = None) -> logging.Logger:
    """Attach a PrivacyLogFilter to a logger (root logger when None)."""
    if logger is None:
        target_logger = logging.getLogger()
    elif isinstance(logger, str):
        target_logger = logging.getLogger(logger)
    else:
        target_logger = logger
    target_logger.addFilter(PrivacyLogFilter())
    return target_logger
