"""
サービスパッケージ
"""
