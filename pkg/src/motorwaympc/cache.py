import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

from motorwaympc.logging_config import logger as log

CACHE_DIR = Path.home() / '.cache/motorwaympc'

CACHE_DAYS_TO_KEEP = 7


def cell_key(penetration: float, mode: str, seed: int, digest: str) -> str:
	"""File-name safe key of one sweep cell."""
	return f'{digest}-p{penetration:.4f}-{mode}-s{seed}'


class ResultCache:
	def __init__(
		self, cache_dir: Path = CACHE_DIR, cache_days_to_keep: int = CACHE_DAYS_TO_KEEP
	) -> None:
		self.cache_dir = cache_dir
		self.cache_days_to_keep = cache_days_to_keep

	def path(self, key: str) -> Path:
		return self.cache_dir / f'{key}.json'

	def get(self, key: str) -> Optional[Dict[str, Any]]:
		"""Retrieve a cached cell result if it exists and is up-to-date."""
		cache_file = self.path(key)
		log.debug('Checking for cached result %s...', key)
		if not cache_file.exists():
			return None
		try:
			with cache_file.open('r') as f:
				cached_data = json.load(f)
			cache_date = datetime.fromisoformat(cached_data['date'])
			diff = datetime.now() - cache_date
			if diff.days <= self.cache_days_to_keep:
				if diff.days > 0:
					age = f'{diff.days} days ago'
				elif diff.seconds >= 3600:
					age = f'{diff.seconds // 3600} hours ago'
				else:
					age = f'{diff.seconds // 60} minutes ago'
				log.info(
					'[bold magenta]%s:[/] Using cached result from %s from file://%s',
					key,
					age,
					cache_file,
				)
				result: Dict[str, Any] = cached_data['data']
				return result
			log.info('[bold magenta]%s:[/] Cached result is outdated.', key)
		except (json.JSONDecodeError, KeyError, ValueError) as e:
			log.warning('Failed to load cached result %s: %s', key, e)
		return None

	def put(self, key: str, data: Dict[str, Any]) -> None:
		"""Save a cell result to the cache."""
		self.cache_dir.mkdir(parents=True, exist_ok=True)
		with self.path(key).open('w') as f:
			json.dump({'date': datetime.now().isoformat(), 'data': data}, f)
		log.info('[bold magenta]%s:[/] Result cached successfully.', key)
